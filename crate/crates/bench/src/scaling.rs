//! Wall-clock scaling of the solve and the correction phase.

use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mahi::fmm::{Boundary, Fmm, FmmConfig, FmmError, Operators};
use mahi::mahi::{assemble_lambda_forces, compute_corrections, MahiError};
use mahi::system::{scale_charges, LambdaState, System, TitratableSite};
use serde::{Deserialize, Serialize};

use crate::generate::{generate_random_system, scaling_system, Distribution, SiteSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    Sites,
    Forms,
    Particles,
}

impl FromStr for ScalingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sites" => Ok(Self::Sites),
            "forms" => Ok(Self::Forms),
            "particles" => Ok(Self::Particles),
            _ => Err(format!("unknown benchmark kind '{s}', expected sites, forms or particles")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub kind: ScalingKind,
    /// Sites, forms per site, or particle counts, depending on `kind`.
    pub sizes: Vec<usize>,
    pub particles: usize,
    pub sites: usize,
    pub forms: usize,
    pub order: usize,
    /// `None` picks the fastest depth per size.
    pub depth: Option<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            kind: ScalingKind::Forms,
            sizes: vec![2, 4, 8, 16],
            particles: 20_000,
            sites: 8,
            forms: 2,
            order: 8,
            depth: None,
            warmup: 1,
            repetitions: 5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub sites: usize,
    pub forms: usize,
    pub d: usize,
    pub threads: usize,
    pub t_baseline: f64,
    pub t_solve: f64,
    pub t_corrections: f64,
    pub overhead_vs_baseline: f64,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `reps` timed runs after `warmup` discarded ones.
pub fn time_median<F: FnMut() -> Result<(), MahiError>>(warmup: usize, reps: usize, mut f: F) -> Result<f64, MahiError> {
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        t.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(t))
}

/// Timings of one correction phase: corrections plus force assembly.
pub fn correction_phase(fmm: &Fmm, sites: &[TitratableSite], scaled: &[f64], potentials: &[f64], lambda: &[Vec<f64>]) -> Result<Duration, MahiError> {
    let t0 = Instant::now();
    let corr = compute_corrections(fmm, sites, scaled, lambda);
    assemble_lambda_forces(potentials, &corr, sites, lambda)?;
    Ok(t0.elapsed())
}

fn lambda_of(sites: &[TitratableSite]) -> Vec<Vec<f64>> {
    LambdaState::uniform(sites, 0.345, 1.0).values()
}

fn scaled(system: &System, lambda: &[Vec<f64>]) -> Vec<f64> {
    let w: Vec<Vec<f64>> = lambda.iter().map(|l| mahi::lambda::expand_weights(l).expect("λ count")).collect();
    scale_charges(&system.particles, &system.sites, &w).expect("weights match")
}

fn measure(system: &System, depth: usize, ops: Arc<Operators>, spec: &ScalingSpec) -> Result<ScalingRow, MahiError> {
    let config = FmmConfig::new(spec.order, depth);
    let fmm = Fmm::with_operators(&system.particles.positions, system.particles.box_length, config, ops)?;
    let lambda = lambda_of(&system.sites);
    let q = scaled(system, &lambda);
    let t_baseline = time_median(spec.warmup, spec.repetitions, || {
        fmm.solve(&q, false)?;
        Ok(())
    })?;
    let sol = fmm.solve(&q, false)?;
    let t_corrections = time_median(spec.warmup, spec.repetitions, || {
        correction_phase(&fmm, &system.sites, &q, &sol.potentials, &lambda)?;
        Ok(())
    })?;
    let t_solve = t_baseline;
    Ok(ScalingRow {
        n: system.particles.positions.len(),
        sites: system.sites.len(),
        forms: system.num_forms_total(),
        d: depth,
        threads: rayon::current_num_threads(),
        t_baseline,
        t_solve,
        t_corrections,
        overhead_vs_baseline: t_corrections / t_baseline,
    })
}

/// Depth with the smallest measured solve time.
pub fn optimal_depth(system: &System, order: usize, ops: &Arc<Operators>, candidates: &[usize]) -> Result<usize, FmmError> {
    let mut best = (f64::INFINITY, 0);
    let q = system.particles.charges.clone();
    for &d in candidates {
        let fmm = Fmm::with_operators(&system.particles.positions, system.particles.box_length, FmmConfig::new(order, d), ops.clone())?;
        let t0 = Instant::now();
        fmm.solve(&q, false)?;
        let t = t0.elapsed().as_secs_f64();
        if t < best.0 {
            best = (t, d);
        }
    }
    Ok(best.1)
}

fn depth_candidates(n: usize) -> Vec<usize> {
    // about 2 to 60 particles per leaf
    (0..=mahi::fmm::MAX_DEPTH).filter(|&d| {
        let leaves = 8f64.powi(d as i32);
        let per = n as f64 / leaves;
        (2.0..=200.0).contains(&per) || d == 0 && n < 200
    }).collect()
}

pub fn scaling_bench(spec: &ScalingSpec) -> Result<Vec<ScalingRow>, MahiError> {
    let mut rows = Vec::new();
    for &size in &spec.sizes {
        let system = match spec.kind {
            ScalingKind::Sites => generate_random_system(
                spec.particles.saturating_sub(size * 10),
                SiteSpec { count: size, atoms: 10, forms: spec.forms },
                Distribution::Typical,
                None,
                spec.seed,
            ),
            ScalingKind::Forms => generate_random_system(
                spec.particles.saturating_sub(spec.sites * 10),
                SiteSpec { count: spec.sites, atoms: 10, forms: size },
                Distribution::Typical,
                None,
                spec.seed,
            ),
            ScalingKind::Particles => scaling_system(size, spec.forms, Distribution::Typical, spec.seed),
        };
        let ops = Arc::new(Operators::new(spec.order, system.particles.box_length, Boundary::periodic())?);
        let depth = match spec.depth {
            Some(d) => d,
            None => {
                let mut c = depth_candidates(system.particles.positions.len());
                if c.is_empty() {
                    c.push(0);
                }
                optimal_depth(&system, spec.order, &ops, &c)?
            }
        };
        rows.push(measure(&system, depth, ops, spec)?);
    }
    Ok(rows)
}

/// Least-squares line `y = a + b x` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (a, b, r2)
}
