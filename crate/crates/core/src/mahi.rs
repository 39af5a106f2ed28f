//! Hamiltonian-interpolated energies and λ-derivatives from one charge-scaled
//! solve plus per-form corrections.
//!
//! With `A'` the intra-site pair operator (first image shell summed directly,
//! far images through the lattice operator, plus the surface term), the HI
//! energy is
//! `H = H̃ + Σ_s [Σ_ρ λ̃_ρ E'(q_ρ) - E'(q̃_s)]`, `E'(x) = ½ xᵀA'x`.
//! Each form gets a correction `C_ρ = q_ρᵀ A' Q_ρ` with `Q_ρ = q̃ - ½ q_ρ`,
//! split into the pair, lattice and dipole parts of `A'`. Then
//! `∂H/∂λ̃_ρ = Ṽ·q_ρ - C_ρ` and `H = H̃ + Σ_s [E'(q̃_s) - Σ_ρ λ̃_ρ C_ρ]`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmm::dipole::{dipole_coupling, dipole_moment, surface_coefficient};
use crate::fmm::harmonics::{contract, l2p, len, p2m};
use crate::fmm::{Boundary, Fmm, FmmConfig, FmmError, Operators, Solution};
use crate::lambda::{self, branch_index_map, LambdaError};
use crate::sum::Neumaier;
use crate::system::{scale_charges, System, TitratableSite, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Hamiltonian interpolation: corrections applied.
    Hi,
    /// Charge interpolation: the scaled solve as is.
    Qi,
}

#[derive(Debug, Error, PartialEq)]
pub enum MahiError {
    #[error(transparent)]
    Fmm(#[from] FmmError),
    #[error(transparent)]
    Lambda(#[from] LambdaError),
    #[error("invalid system: {0}")]
    Invalid(Violation),
    #[error("λ changed since the corrections were computed")]
    StaleLambda,
    #[error("{got} λ vectors for {expected} sites")]
    SiteCount { expected: usize, got: usize },
}

/// Correction charges of one form: `Q = q̃ - ½ q_ρ` and `Q̂ = q̃ - q_ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionCharges {
    pub form: Vec<f64>,
    pub q: Vec<f64>,
    pub q_hat: Vec<f64>,
}

impl CorrectionCharges {
    pub fn new(scaled: &[f64], form: &[f64]) -> Self {
        Self {
            form: form.to_vec(),
            q: scaled.iter().zip(form).map(|(s, f)| s - 0.5 * f).collect(),
            q_hat: scaled.iter().zip(form).map(|(s, f)| s - f).collect(),
        }
    }
}

/// Correction terms of one site-form.
#[derive(Clone, Debug, PartialEq)]
pub struct FormCorrection {
    pub p2p: f64,
    pub lattice: f64,
    pub dipole: f64,
    /// Multipole of the form's own charges about the cell centre.
    pub form_multipole: Vec<Complex64>,
    /// Multipole of `Q`.
    pub q_multipole: Vec<Complex64>,
}

impl FormCorrection {
    pub fn total(&self) -> f64 {
        self.p2p + self.lattice + self.dipole
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteCorrections {
    pub forms: Vec<FormCorrection>,
    /// `E'(q̃_s)`.
    pub scaled_self_energy: f64,
}

/// Corrections for every site, tagged with the λ they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionSet {
    lambda: Vec<Vec<f64>>,
    pub sites: Vec<SiteCorrections>,
}

impl CorrectionSet {
    pub fn lambda(&self) -> &[Vec<f64>] {
        &self.lambda
    }
}

/// λ-derivatives of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaForces {
    lambda: Vec<Vec<f64>>,
    /// `∂H/∂λ̃_ρ` per site and form.
    pub form_derivatives: Vec<Vec<f64>>,
    /// Branch sums `K_b`, `2k` for `1 - λ_k` and `2k + 1` for `λ_k`.
    pub branch_terms: Vec<Vec<f64>>,
    /// `∂H/∂λ_k = K_{2k+1} - K_{2k}` per site.
    pub derivatives: Vec<Vec<f64>>,
}

impl LambdaForces {
    pub fn lambda(&self) -> &[Vec<f64>] {
        &self.lambda
    }

    /// `-∂H/∂λ`.
    pub fn forces(&self) -> Vec<Vec<f64>> {
        self.derivatives.iter().map(|s| s.iter().map(|d| -d).collect()).collect()
    }

    /// Errors when `lambda` differs from the values these derivatives belong to.
    pub fn check_current(&self, lambda: &[Vec<f64>]) -> Result<(), MahiError> {
        if same_lambda(&self.lambda, lambda) {
            Ok(())
        } else {
            Err(MahiError::StaleLambda)
        }
    }
}

fn same_lambda(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()))
}

#[derive(Clone, Debug)]
pub struct MahiResult {
    /// HI energy in HI mode, the scaled energy in QI mode.
    pub energy: f64,
    /// Energy of the scaled charges `H̃`.
    pub scaled_energy: f64,
    pub lambda_forces: LambdaForces,
    /// `-∇H` per particle, when requested.
    pub spatial_forces: Option<Vec<[f64; 3]>>,
    pub solution: Solution,
    pub solve_time: Duration,
    pub correction_time: Duration,
}

/// Intra-site pair operator `A'` restricted to one site's atoms.
struct SiteOperator<'a> {
    positions: Vec<[f64; 3]>,
    box_length: f64,
    center: [f64; 3],
    boundary: Boundary,
    ops: &'a Operators,
    shifts: Vec<[f64; 3]>,
}

impl<'a> SiteOperator<'a> {
    fn new(fmm: &'a Fmm, site: &TitratableSite) -> Self {
        let l = fmm.box_length();
        let boundary = fmm.config().boundary;
        let shifts = if boundary.is_periodic() {
            let mut v = Vec::with_capacity(27);
            for x in -1..=1 {
                for y in -1..=1 {
                    for z in -1..=1 {
                        v.push([x as f64 * l, y as f64 * l, z as f64 * l]);
                    }
                }
            }
            v
        } else {
            vec![[0.0; 3]]
        };
        Self {
            positions: site.indices.iter().map(|&i| fmm.positions()[i]).collect(),
            box_length: l,
            center: fmm.center(),
            boundary,
            ops: fmm.operators(),
            shifts,
        }
    }

    fn order(&self) -> usize {
        self.ops.order()
    }

    fn multipole(&self, charges: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); len(self.order())];
        p2m(self.order(), self.center, &self.positions, charges, &mut out);
        out
    }

    /// `xᵀ A_pair y` over the directly summed image shell.
    fn pair(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = Neumaier::new();
        for (a, ra) in self.positions.iter().enumerate() {
            if x[a] == 0.0 {
                continue;
            }
            let mut row = Neumaier::new();
            for sh in &self.shifts {
                let zero = *sh == [0.0; 3];
                for (b, rb) in self.positions.iter().enumerate() {
                    if zero && a == b {
                        continue;
                    }
                    let dx = ra[0] - rb[0] - sh[0];
                    let dy = ra[1] - rb[1] - sh[1];
                    let dz = ra[2] - rb[2] - sh[2];
                    row.add(y[b] / (dx * dx + dy * dy + dz * dz).sqrt());
                }
            }
            acc.add(x[a] * row.value());
        }
        acc.value()
    }

    fn lattice(&self, mx: &[Complex64], my: &[Complex64]) -> f64 {
        match self.ops.lattice() {
            Some(lat) => {
                let mut local = vec![Complex64::new(0.0, 0.0); len(self.order())];
                lat.apply(my, &mut local);
                contract(self.order(), mx, &local)
            }
            None => 0.0,
        }
    }

    fn dipole(&self, x: &[f64], y: &[f64]) -> f64 {
        if !self.boundary.dipole() {
            return 0.0;
        }
        let mx = dipole_moment(self.center, &self.positions, x);
        let my = dipole_moment(self.center, &self.positions, y);
        dipole_coupling(mx, my, self.box_length)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let m = self.multipole(x);
        0.5 * (self.pair(x, x) + self.lattice(&m, &m) + self.dipole(x, x))
    }

    /// Gradient of the potential of `x` under `A'` at every site atom.
    fn field_gradient(&self, x: &[f64]) -> Vec<[f64; 3]> {
        let n = len(self.order());
        let local = self.ops.lattice().map(|lat| {
            let m = self.multipole(x);
            let mut local = vec![Complex64::new(0.0, 0.0); n];
            lat.apply(&m, &mut local);
            local
        });
        let gdip = if self.boundary.dipole() {
            let mu = dipole_moment(self.center, &self.positions, x);
            let k = surface_coefficient(self.box_length);
            [-k * mu[0], -k * mu[1], -k * mu[2]]
        } else {
            [0.0; 3]
        };
        let mut scratch = vec![Complex64::new(0.0, 0.0); n];
        self.positions
            .iter()
            .enumerate()
            .map(|(a, ra)| {
                let mut g = gdip;
                if let Some(local) = &local {
                    let y = [ra[0] - self.center[0], ra[1] - self.center[1], ra[2] - self.center[2]];
                    let (_, gl) = l2p(self.order(), local, y, &mut scratch);
                    for k in 0..3 {
                        g[k] += gl[k];
                    }
                }
                for sh in &self.shifts {
                    let zero = *sh == [0.0; 3];
                    for (b, rb) in self.positions.iter().enumerate() {
                        if zero && a == b {
                            continue;
                        }
                        let d = [ra[0] - rb[0] - sh[0], ra[1] - rb[1] - sh[1], ra[2] - rb[2] - sh[2]];
                        let inv = 1.0 / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        let f = x[b] * inv * inv * inv;
                        for k in 0..3 {
                            g[k] -= f * d[k];
                        }
                    }
                }
                g
            })
            .collect()
    }
}

fn site_charges(q: &[f64], site: &TitratableSite) -> Vec<f64> {
    site.indices.iter().map(|&i| q[i]).collect()
}

/// Pair part of `C_ρ`: `Σ_i q_ρi Σ_j Σ_n' Q_j / |r_ij + nL|` over the first image shell.
pub fn c_p2p(fmm: &Fmm, site: &TitratableSite, charges: &CorrectionCharges) -> f64 {
    SiteOperator::new(fmm, site).pair(&charges.form, &charges.q)
}

/// Lattice part of `C_ρ`: `ω(q_ρ)·𝓛(ω(Q))`.
pub fn c_lattice(fmm: &Fmm, site: &TitratableSite, charges: &CorrectionCharges) -> f64 {
    let op = SiteOperator::new(fmm, site);
    op.lattice(&op.multipole(&charges.form), &op.multipole(&charges.q))
}

/// Surface part of `C_ρ`: `-(4π/3V) μ(q_ρ)·μ(Q)`; zero without dipole compensation.
pub fn c_dipole(fmm: &Fmm, site: &TitratableSite, charges: &CorrectionCharges) -> f64 {
    SiteOperator::new(fmm, site).dipole(&charges.form, &charges.q)
}

/// `xᵀ A' y` for site-local charge vectors `x` and `y`, with `A'` the intra-site
/// operator the corrections use.
pub fn intra_site_coupling(fmm: &Fmm, site: &TitratableSite, x: &[f64], y: &[f64]) -> f64 {
    let op = SiteOperator::new(fmm, site);
    op.pair(x, y) + op.lattice(&op.multipole(x), &op.multipole(y)) + op.dipole(x, y)
}

/// Corrections for every site-form at the scaled charges `scaled`.
pub fn compute_corrections(fmm: &Fmm, sites: &[TitratableSite], scaled: &[f64], lambda: &[Vec<f64>]) -> CorrectionSet {
    let ops: Vec<SiteOperator> = sites.iter().map(|s| SiteOperator::new(fmm, s)).collect();
    let tasks: Vec<(usize, usize)> =
        sites.iter().enumerate().flat_map(|(s, site)| (0..site.forms.len()).map(move |r| (s, r))).collect();
    let scaled_site: Vec<Vec<f64>> = sites.iter().map(|s| site_charges(scaled, s)).collect();
    let results: Vec<FormCorrection> = tasks
        .par_iter()
        .map(|&(s, r)| {
            let op = &ops[s];
            let cc = CorrectionCharges::new(&scaled_site[s], &sites[s].forms[r]);
            let form_multipole = op.multipole(&cc.form);
            let q_multipole = op.multipole(&cc.q);
            FormCorrection {
                p2p: op.pair(&cc.form, &cc.q),
                lattice: op.lattice(&form_multipole, &q_multipole),
                dipole: op.dipole(&cc.form, &cc.q),
                form_multipole,
                q_multipole,
            }
        })
        .collect();
    let self_energy: Vec<f64> = ops.par_iter().zip(&scaled_site).map(|(op, q)| op.energy(q)).collect();
    let mut it = results.into_iter();
    let sites_out = sites
        .iter()
        .zip(self_energy)
        .map(|(site, e)| SiteCorrections { forms: it.by_ref().take(site.forms.len()).collect(), scaled_self_energy: e })
        .collect();
    CorrectionSet { lambda: lambda.to_vec(), sites: sites_out }
}

fn check_sites(sites: &[TitratableSite], lambda: &[Vec<f64>]) -> Result<(), MahiError> {
    if lambda.len() != sites.len() {
        return Err(MahiError::SiteCount { expected: sites.len(), got: lambda.len() });
    }
    for (s, (site, l)) in sites.iter().zip(lambda).enumerate() {
        if 1usize << l.len() != site.forms.len() {
            return Err(MahiError::Invalid(Violation::LambdaLength { site: s, expected: site.num_lambda(), got: l.len() }));
        }
    }
    Ok(())
}

/// Maps `∂H/∂λ̃` to `∂H/∂λ` through the branch sets.
fn assemble(sites: &[TitratableSite], lambda: &[Vec<f64>], form_derivatives: Vec<Vec<f64>>) -> Result<LambdaForces, MahiError> {
    let mut branch_terms = Vec::with_capacity(sites.len());
    let mut derivatives = Vec::with_capacity(sites.len());
    for (l, d) in lambda.iter().zip(&form_derivatives) {
        let map = branch_index_map(l.len())?;
        let k_terms: Vec<f64> = (0..2 * l.len())
            .map(|b| {
                map.forms_using(b).into_iter().map(|rho| map.exclusion_product(l, rho, b / 2) * d[rho]).collect::<Neumaier>().value()
            })
            .collect();
        derivatives.push(map.pairs.iter().map(|&(lo, hi)| k_terms[hi] - k_terms[lo]).collect());
        branch_terms.push(k_terms);
    }
    Ok(LambdaForces { lambda: lambda.to_vec(), form_derivatives, branch_terms, derivatives })
}

/// HI λ-derivatives from the scaled potentials and the corrections.
pub fn assemble_lambda_forces(
    potentials: &[f64],
    corrections: &CorrectionSet,
    sites: &[TitratableSite],
    lambda: &[Vec<f64>],
) -> Result<LambdaForces, MahiError> {
    if !same_lambda(&corrections.lambda, lambda) {
        return Err(MahiError::StaleLambda);
    }
    check_sites(sites, lambda)?;
    let form_derivatives = sites
        .iter()
        .zip(&corrections.sites)
        .map(|(site, corr)| {
            site.forms
                .iter()
                .zip(&corr.forms)
                .map(|(form, c)| {
                    let v: Neumaier = site.indices.iter().zip(form).map(|(&i, &q)| potentials[i] * q).collect();
                    v.value() - c.total()
                })
                .collect()
        })
        .collect();
    assemble(sites, lambda, form_derivatives)
}

/// QI λ-derivatives `Ṽ·q_ρ` mapped through the branch sets.
pub fn qi_lambda_forces(potentials: &[f64], sites: &[TitratableSite], lambda: &[Vec<f64>]) -> Result<LambdaForces, MahiError> {
    check_sites(sites, lambda)?;
    let form_derivatives = sites
        .iter()
        .map(|site| {
            site.forms
                .iter()
                .map(|form| site.indices.iter().zip(form).map(|(&i, &q)| potentials[i] * q).collect::<Neumaier>().value())
                .collect()
        })
        .collect();
    assemble(sites, lambda, form_derivatives)
}

/// A solver for a fixed geometry and site layout.
#[derive(Clone, Debug)]
pub struct Mahi {
    fmm: Fmm,
    base_charges: Vec<f64>,
    sites: Vec<TitratableSite>,
    mode: Mode,
}

impl Mahi {
    pub fn new(system: &System, config: FmmConfig, mode: Mode) -> Result<Self, MahiError> {
        if let Some(v) = crate::system::validate_system(&system.particles, &system.sites, None).into_iter().next() {
            return Err(MahiError::Invalid(v));
        }
        let fmm = Fmm::new(&system.particles.positions, system.particles.box_length, config)?;
        Ok(Self::with_fmm(fmm, system, mode))
    }

    /// Reuses translation tables across geometries.
    pub fn with_operators(system: &System, config: FmmConfig, ops: Arc<Operators>, mode: Mode) -> Result<Self, MahiError> {
        if let Some(v) = crate::system::validate_system(&system.particles, &system.sites, None).into_iter().next() {
            return Err(MahiError::Invalid(v));
        }
        let fmm = Fmm::with_operators(&system.particles.positions, system.particles.box_length, config, ops)?;
        Ok(Self::with_fmm(fmm, system, mode))
    }

    fn with_fmm(fmm: Fmm, system: &System, mode: Mode) -> Self {
        Self { fmm, base_charges: system.particles.charges.clone(), sites: system.sites.clone(), mode }
    }

    pub fn fmm(&self) -> &Fmm {
        &self.fmm
    }

    pub fn sites(&self) -> &[TitratableSite] {
        &self.sites
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn base_charges(&self) -> &[f64] {
        &self.base_charges
    }

    pub fn weights(&self, lambda: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MahiError> {
        check_sites(&self.sites, lambda)?;
        lambda.iter().map(|l| lambda::expand_weights(l).map_err(MahiError::from)).collect()
    }

    pub fn scaled_charges(&self, lambda: &[Vec<f64>]) -> Result<Vec<f64>, MahiError> {
        let w = self.weights(lambda)?;
        let particles = crate::system::ParticleSystem {
            box_length: self.fmm.box_length(),
            positions: Vec::new(),
            charges: self.base_charges.clone(),
        };
        Ok(scale_charges(&particles, &self.sites, &w).expect("weights match sites"))
    }

    /// Energy of arbitrary charges with the same solver configuration.
    pub fn energy_of(&self, charges: &[f64]) -> Result<f64, MahiError> {
        Ok(self.fmm.solve(charges, false)?.energy)
    }

    /// One solve and, in HI mode, the corrections.
    pub fn evaluate(&self, lambda: &[Vec<f64>], spatial: bool) -> Result<MahiResult, MahiError> {
        let w = self.weights(lambda)?;
        let q = self.scaled_charges(lambda)?;
        let t0 = Instant::now();
        let solution = self.fmm.solve(&q, spatial)?;
        let solve_time = t0.elapsed();
        let t1 = Instant::now();
        let (energy, lambda_forces, spatial_forces) = match self.mode {
            Mode::Qi => {
                let lf = qi_lambda_forces(&solution.potentials, &self.sites, lambda)?;
                let sf = solution.gradients.as_ref().map(|g| scaled_forces(&q, g));
                (solution.energy, lf, sf)
            }
            Mode::Hi => {
                let corr = compute_corrections(&self.fmm, &self.sites, &q, lambda);
                let lf = assemble_lambda_forces(&solution.potentials, &corr, &self.sites, lambda)?;
                let mut e = Neumaier::new();
                e.add(solution.energy);
                for (sc, ws) in corr.sites.iter().zip(&w) {
                    e.add(sc.scaled_self_energy);
                    for (c, wr) in sc.forms.iter().zip(ws) {
                        e.add(-wr * c.total());
                    }
                }
                let sf = solution.gradients.as_ref().map(|g| {
                    let mut f = scaled_forces(&q, g);
                    self.add_correction_forces(&q, &w, &mut f);
                    f
                });
                (e.value(), lf, sf)
            }
        };
        let correction_time = t1.elapsed();
        Ok(MahiResult { energy, scaled_energy: solution.energy, lambda_forces, spatial_forces, solution, solve_time, correction_time })
    }

    /// Subtracts `∇[Σ_ρ λ̃_ρ E'(q_ρ) - E'(q̃_s)]` for every site.
    fn add_correction_forces(&self, scaled: &[f64], weights: &[Vec<f64>], forces: &mut [[f64; 3]]) {
        for (site, ws) in self.sites.iter().zip(weights) {
            let op = SiteOperator::new(&self.fmm, site);
            let qs = site_charges(scaled, site);
            let g = op.field_gradient(&qs);
            for (a, &i) in site.indices.iter().enumerate() {
                for k in 0..3 {
                    forces[i][k] += qs[a] * g[a][k];
                }
            }
            for (form, &wr) in site.forms.iter().zip(ws) {
                let g = op.field_gradient(form);
                for (a, &i) in site.indices.iter().enumerate() {
                    for k in 0..3 {
                        forces[i][k] -= wr * form[a] * g[a][k];
                    }
                }
            }
        }
    }
}

fn scaled_forces(q: &[f64], gradients: &[[f64; 3]]) -> Vec<[f64; 3]> {
    q.iter().zip(gradients).map(|(&qi, g)| [-qi * g[0], -qi * g[1], -qi * g[2]]).collect()
}
