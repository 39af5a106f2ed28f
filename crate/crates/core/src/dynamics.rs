//! Langevin dynamics of λ over frozen particle coordinates.
//!
//! Units: time in ps, energy in kJ/mol, λ dimensionless, λ mass in
//! kJ mol⁻¹ ps². Electrostatic λ-derivatives (e²/nm) are converted with
//! [`COULOMB`].

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mahi::{Mahi, MahiError, Mode};
use crate::system::{LambdaState, ParticleSystem, System, TitratableSite};
use crate::units::{kt, COULOMB};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite force on site {site} λ {branch}")]
    NonFiniteForce { site: usize, branch: usize },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("low threshold {low} must be below high threshold {high}")]
    BadThresholds { low: f64, high: f64 },
    #[error("empty λ series")]
    EmptySeries,
    #[error(transparent)]
    Mahi(#[from] MahiError),
}

/// Double well `h·16(λ(1-λ))²` with quartic walls outside `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPotential {
    pub barrier: f64,
    pub wall_stiffness: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BiasPotential {
    fn default() -> Self {
        Self { barrier: 5.0, wall_stiffness: 1.0e5, lower: -0.1, upper: 1.1 }
    }
}

impl BiasPotential {
    pub fn energy(&self, l: f64) -> f64 {
        let s = l * (1.0 - l);
        let mut e = 16.0 * self.barrier * s * s;
        if l < self.lower {
            e += self.wall_stiffness * (self.lower - l).powi(4);
        } else if l > self.upper {
            e += self.wall_stiffness * (l - self.upper).powi(4);
        }
        e
    }

    /// `-dV/dλ`.
    pub fn force(&self, l: f64) -> f64 {
        let s = l * (1.0 - l);
        let mut f = -32.0 * self.barrier * s * (1.0 - 2.0 * l);
        if l < self.lower {
            f += 4.0 * self.wall_stiffness * (self.lower - l).powi(3);
        } else if l > self.upper {
            f -= 4.0 * self.wall_stiffness * (l - self.upper).powi(3);
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Langevin {
    pub dt: f64,
    pub temperature: f64,
    pub friction: f64,
}

impl Default for Langevin {
    fn default() -> Self {
        Self { dt: 0.002, temperature: 300.0, friction: 5.0 }
    }
}

/// One BAOAB step. `forces` must hold the forces at the current λ on entry
/// and holds the forces at the new λ on return.
pub fn step<F, R>(state: &mut LambdaState, forces: &mut Vec<Vec<f64>>, params: &Langevin, rng: &mut R, mut force_fn: F) -> Result<(), DynamicsError>
where
    F: FnMut(&LambdaState) -> Result<Vec<Vec<f64>>, DynamicsError>,
    R: Rng,
{
    if !(params.dt > 0.0) {
        return Err(DynamicsError::BadTimeStep(params.dt));
    }
    check_finite(forces)?;
    let h = 0.5 * params.dt;
    let c1 = (-params.friction * params.dt).exp();
    let kbt = kt(params.temperature);
    for (s, f) in state.sites.iter_mut().zip(forces.iter()) {
        let sigma = ((1.0 - c1 * c1) * kbt / s.mass).sqrt();
        for k in 0..s.values.len() {
            s.velocities[k] += h * f[k] / s.mass;
            s.values[k] += h * s.velocities[k];
            let xi: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            s.velocities[k] = c1 * s.velocities[k] + sigma * xi;
            s.values[k] += h * s.velocities[k];
        }
    }
    *forces = force_fn(state)?;
    check_finite(forces)?;
    for (s, f) in state.sites.iter_mut().zip(forces.iter()) {
        for k in 0..s.values.len() {
            s.velocities[k] += h * f[k] / s.mass;
        }
    }
    Ok(())
}

fn check_finite(forces: &[Vec<f64>]) -> Result<(), DynamicsError> {
    for (site, f) in forces.iter().enumerate() {
        if let Some(branch) = f.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteForce { site, branch });
        }
    }
    Ok(())
}

/// Hysteresis transition counter for one λ.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    /// 0 or 1 once λ has entered a band.
    pub state: Option<u8>,
    pub count: usize,
    pub times: Vec<f64>,
}

impl TransitionRecord {
    pub fn observe(&mut self, l: f64, time: f64, low: f64, high: f64) {
        let next = if l <= low {
            Some(0)
        } else if l >= high {
            Some(1)
        } else {
            None
        };
        if let Some(n) = next {
            if let Some(prev) = self.state {
                if prev != n {
                    self.count += 1;
                    self.times.push(time);
                }
            }
            self.state = Some(n);
        }
    }
}

pub fn count_transitions(series: &[f64], times: &[f64], low: f64, high: f64) -> Result<TransitionRecord, DynamicsError> {
    if !(low < high) {
        return Err(DynamicsError::BadThresholds { low, high });
    }
    if series.is_empty() {
        return Err(DynamicsError::EmptySeries);
    }
    let mut rec = TransitionRecord::default();
    for (&l, &t) in series.iter().zip(times) {
        rec.observe(l, t, low, high);
    }
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub mode: Mode,
    pub steps: usize,
    pub langevin: Langevin,
    pub bias: BiasPotential,
    pub seed: u64,
    /// Frames are stored every `stride` steps; transitions use every step.
    pub stride: usize,
    pub low: f64,
    pub high: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hi,
            steps: 1000,
            langevin: Langevin::default(),
            bias: BiasPotential::default(),
            seed: 0,
            stride: 1,
            low: 0.2,
            high: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub lambda: Vec<Vec<f64>>,
    pub force: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    /// Per site, per λ.
    pub transitions: Vec<Vec<TransitionRecord>>,
    pub final_state: LambdaState,
}

/// Total λ force in kJ/mol: electrostatic plus bias.
pub fn lambda_forces(mahi: &Mahi, state: &LambdaState, bias: &BiasPotential) -> Result<Vec<Vec<f64>>, DynamicsError> {
    let values = state.values();
    let r = mahi.evaluate(&values, false)?;
    r.lambda_forces.check_current(&values)?;
    Ok(r.lambda_forces
        .derivatives
        .iter()
        .zip(&values)
        .map(|(d, l)| d.iter().zip(l).map(|(d, &l)| -COULOMB * d + bias.force(l)).collect())
        .collect())
}

/// Electrostatic energy plus bias, kJ/mol.
pub fn potential_energy(mahi: &Mahi, state: &LambdaState, bias: &BiasPotential) -> Result<f64, DynamicsError> {
    let values = state.values();
    let e = mahi.evaluate(&values, false)?.energy * COULOMB;
    Ok(e + values.iter().flatten().map(|&l| bias.energy(l)).sum::<f64>())
}

pub fn kinetic_energy(state: &LambdaState) -> f64 {
    state.sites.iter().map(|s| 0.5 * s.mass * s.velocities.iter().map(|v| v * v).sum::<f64>()).sum()
}

pub fn run_trajectory(mahi: &Mahi, initial: &LambdaState, config: &TrajectoryConfig) -> Result<Trajectory, DynamicsError> {
    let mut m = mahi.clone();
    m.set_mode(config.mode);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial.clone();
    let mut forces = lambda_forces(&m, &state, &config.bias)?;
    let stride = config.stride.max(1);
    let mut frames = Vec::with_capacity(config.steps / stride + 1);
    let mut transitions: Vec<Vec<TransitionRecord>> =
        state.sites.iter().map(|s| vec![TransitionRecord::default(); s.values.len()]).collect();
    let mut record = |t: f64, st: &LambdaState, f: &[Vec<f64>], frames: &mut Vec<Frame>, n: usize| {
        for (recs, s) in transitions.iter_mut().zip(&st.sites) {
            for (r, &l) in recs.iter_mut().zip(&s.values) {
                r.observe(l, t, config.low, config.high);
            }
        }
        if n.is_multiple_of(stride) {
            frames.push(Frame { time: t, lambda: st.values(), force: f.to_vec() });
        }
    };
    record(0.0, &state, &forces, &mut frames, 0);
    for n in 1..=config.steps {
        step(&mut state, &mut forces, &config.langevin, &mut rng, |s| lambda_forces(&m, s, &config.bias))?;
        record(n as f64 * config.langevin.dt, &state, &forces, &mut frames, n);
    }
    Ok(Trajectory { frames, transitions, final_state: state })
}

/// Per-replica seeds derived from one master seed.
pub fn replica_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.random()).collect()
}

/// Independent replicas in parallel; results in replica order.
pub fn run_replicas(
    mahi: &Mahi,
    initial: &LambdaState,
    config: &TrajectoryConfig,
    count: usize,
    master_seed: u64,
) -> Result<Vec<Trajectory>, DynamicsError> {
    replica_seeds(master_seed, count)
        .into_par_iter()
        .map(|seed| run_trajectory(mahi, initial, &TrajectoryConfig { seed, ..*config }))
        .collect()
}

pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> io::Result<()> {
    writeln!(w, "time_ps,site,branch,lambda,force")?;
    for f in &traj.frames {
        for (s, (ls, fs)) in f.lambda.iter().zip(&f.force).enumerate() {
            for (b, (l, fo)) in ls.iter().zip(fs).enumerate() {
                writeln!(w, "{},{},{},{},{}", f.time, s, b, l, fo)?;
            }
        }
    }
    Ok(())
}

pub fn write_transitions_csv<W: Write>(mut w: W, trajectories: &[(String, &Trajectory)]) -> io::Result<()> {
    writeln!(w, "replica,site,branch,transitions,final_state")?;
    for (name, t) in trajectories {
        for (s, recs) in t.transitions.iter().enumerate() {
            for (b, r) in recs.iter().enumerate() {
                let st = r.state.map_or("none".to_string(), |v| v.to_string());
                writeln!(w, "{},{},{},{},{}", name, s, b, r.count, st)?;
            }
        }
    }
    Ok(())
}

/// Two-atom site whose forms are mirror images, with a mirror-symmetric
/// background, in an open 3 nm cell. `|k|/8` equals `gap_kt` thermal units at
/// `temperature`, so charge interpolation adds that barrier at λ = ½.
pub fn symmetric_toy_system(gap_kt: f64, temperature: f64) -> System {
    let r = 0.15;
    let a = (gap_kt * kt(temperature) * r / COULOMB).sqrt();
    let c = 1.5;
    let positions = vec![[c - r / 2.0, c, c], [c + r / 2.0, c, c], [c, c - 0.5, c], [c, c + 0.5, c]];
    let charges = vec![0.0, 0.0, 0.3, 0.3];
    let sites = vec![TitratableSite { indices: vec![0, 1], forms: vec![vec![a, -a], vec![-a, a]] }];
    let lambda = LambdaState::uniform(&sites, 0.5, 5.0);
    System { particles: ParticleSystem { box_length: 3.0, positions, charges }, sites, lambda }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SiteLambda;

    fn one(l: f64, v: f64, mass: f64) -> LambdaState {
        LambdaState { sites: vec![SiteLambda { values: vec![l], velocities: vec![v], mass }] }
    }

    #[test]
    fn bias_shape() {
        let b = BiasPotential::default();
        assert_eq!(b.energy(0.0), 0.0);
        assert_eq!(b.energy(1.0), 0.0);
        assert!((b.energy(0.5) - b.barrier).abs() < 1e-14);
        assert_eq!(b.force(0.5), 0.0);
        for l in [-0.3, 0.1, 0.37, 0.8, 1.25] {
            let h = 1e-6;
            let fd = -(b.energy(l + h) - b.energy(l - h)) / (2.0 * h);
            assert!((fd - b.force(l)).abs() < 1e-4 * fd.abs().max(1.0), "{l}");
        }
        assert!(b.energy(-0.2) > b.energy(0.0));
        assert!(b.energy(1.3) > 1.0);
    }

    #[test]
    fn fixed_point_without_forces() {
        let p = Langevin { dt: 0.002, temperature: 0.0, friction: 5.0 };
        let mut s = one(0.3, 0.0, 5.0);
        let mut f = vec![vec![0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            step(&mut s, &mut f, &p, &mut rng, |_| Ok(vec![vec![0.0]])).unwrap();
        }
        assert_eq!(s.sites[0].values[0], 0.3);
    }

    #[test]
    fn constant_force_kinematics() {
        let p = Langevin { dt: 0.01, temperature: 0.0, friction: 0.0 };
        let (m, force) = (2.0, 0.7);
        let mut s = one(0.1, 0.0, m);
        let mut f = vec![vec![force]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            step(&mut s, &mut f, &p, &mut rng, |_| Ok(vec![vec![force]])).unwrap();
        }
        let t = 1.0;
        assert!((s.sites[0].values[0] - (0.1 + 0.5 * force / m * t * t)).abs() < 1e-10);
    }

    #[test]
    fn equipartition_in_harmonic_well() {
        let spring = 50.0;
        let p = Langevin { dt: 0.01, temperature: 300.0, friction: 5.0 };
        let mut s = one(0.0, 0.0, 1.0);
        let mut f = vec![vec![0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let n = 1_000_000;
        for _ in 0..n {
            step(&mut s, &mut f, &p, &mut rng, |st| Ok(vec![vec![-spring * st.sites[0].values[0]]])).unwrap();
            let x = s.sites[0].values[0];
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let want = kt(300.0) / spring;
        assert!((var - want).abs() < 0.05 * want, "{var} vs {want}");
    }

    #[test]
    fn nonfinite_force_is_rejected() {
        let p = Langevin::default();
        let mut s = one(0.3, 0.0, 5.0);
        let mut f = vec![vec![f64::NAN]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(step(&mut s, &mut f, &p, &mut rng, |_| Ok(vec![vec![0.0]])), Err(DynamicsError::NonFiniteForce { site: 0, branch: 0 }));
        let bad = Langevin { dt: 0.0, ..p };
        let mut f = vec![vec![0.0]];
        assert!(step(&mut s, &mut f, &bad, &mut rng, |_| Ok(vec![vec![0.0]])).is_err());
    }

    #[test]
    fn transition_counting() {
        let ramp: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let t: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(count_transitions(&ramp, &t, 0.2, 0.8).unwrap().count, 1);
        let inside: Vec<f64> = (0..100).map(|i| 0.5 + 0.25 * (i as f64).sin()).collect();
        assert_eq!(count_transitions(&inside, &t, 0.2, 0.8).unwrap().count, 0);
        let square: Vec<f64> = (0..100).map(|i| if (i / 10) % 2 == 0 { 0.05 } else { 0.95 }).collect();
        let r = count_transitions(&square, &t, 0.2, 0.8).unwrap();
        assert_eq!(r.count, 9);
        assert_eq!(r.times[0], 10.0);
        assert!(count_transitions(&ramp, &t, 0.8, 0.2).is_err());
        assert_eq!(count_transitions(&[], &[], 0.2, 0.8), Err(DynamicsError::EmptySeries));
    }

    #[test]
    fn sine_crosses_once_per_half_period() {
        let dt = 0.01;
        let n = (10.0 * std::f64::consts::PI / dt) as usize;
        let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let s: Vec<f64> = t.iter().map(|&x| 0.5 + 0.45 * x.sin()).collect();
        // ten half periods; the first only assigns the initial state
        assert_eq!(count_transitions(&s, &t, 0.2, 0.8).unwrap().count, 9);
    }

    #[test]
    fn replica_seeds_are_stable() {
        assert_eq!(replica_seeds(42, 3), replica_seeds(42, 3));
        assert_ne!(replica_seeds(42, 3)[0], replica_seeds(43, 3)[0]);
    }
}
