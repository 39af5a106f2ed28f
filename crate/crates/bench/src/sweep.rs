//! Relative deviation of MAHI λ-forces from end-state references.

use std::sync::Arc;

use mahi::fmm::{Boundary, FmmConfig, Operators, Precision, MAX_DEPTH, MAX_ORDER};
use mahi::mahi::{Mahi, MahiError, Mode};
use mahi::oracle::{end_state_hamiltonians, reference_lambda_forces, OracleError};
use mahi::system::System;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{generate_random_system, Distribution, SiteSpec};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Mahi(#[from] MahiError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("non-finite deviation at p={p} d={d}")]
    NonFinite { p: usize, d: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub orders: Vec<usize>,
    pub depths: Vec<usize>,
    pub precision: Precision,
    pub boundary: Boundary,
    pub case: Distribution,
    pub forms: usize,
    pub n_background: usize,
    pub site_atoms: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            orders: (1..=MAX_ORDER).collect(),
            depths: vec![0, 1, 2, 3],
            precision: Precision::Double,
            boundary: Boundary::periodic(),
            case: Distribution::Typical,
            forms: 2,
            n_background: 1000,
            site_atoms: 10,
            repetitions: 1,
            seed: 1,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if let Some(&p) = self.orders.iter().find(|&&p| p > MAX_ORDER) {
            return Err(SweepError::Spec(format!("order {p} exceeds {MAX_ORDER}")));
        }
        if let Some(&d) = self.depths.iter().find(|&&d| d > MAX_DEPTH) {
            return Err(SweepError::Spec(format!("depth {d} exceeds {MAX_DEPTH}")));
        }
        if self.repetitions == 0 {
            return Err(SweepError::Spec("repetitions must be at least 1".into()));
        }
        if !matches!(self.forms, 2 | 4) {
            return Err(SweepError::Spec(format!("forms must be 2 or 4, got {}", self.forms)));
        }
        Ok(())
    }

    /// λ values used by the sweep: 0.345, then 0.721.
    pub fn lambda(&self) -> Vec<Vec<f64>> {
        if self.forms == 2 {
            vec![vec![0.345]]
        } else {
            vec![vec![0.345, 0.721]]
        }
    }

    pub fn system(&self, rep: usize) -> System {
        generate_random_system(
            self.n_background,
            SiteSpec { count: 1, atoms: self.site_atoms, forms: self.forms },
            self.case,
            None,
            self.seed.wrapping_add(rep as u64),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub case: String,
    pub forms: usize,
    pub rep: usize,
    pub p: usize,
    pub d: usize,
    pub site: usize,
    pub branch: usize,
    pub force: f64,
    pub reference: f64,
    pub deviation: f64,
}

/// Forces and references for one system at one `(p, d)`.
pub fn deviation_rows(system: &System, lambda: &[Vec<f64>], config: FmmConfig, ops: Arc<Operators>) -> Result<Vec<(usize, usize, f64, f64)>, SweepError> {
    let m = Mahi::with_operators(system, config, ops, Mode::Hi)?;
    let refs = end_state_hamiltonians(&system.particles.charges, &system.sites, |q| m.energy_of(q).unwrap_or(f64::NAN))?;
    let want = reference_lambda_forces(&refs, lambda)?;
    let got = m.evaluate(lambda, false)?.lambda_forces.forces();
    let mut rows = Vec::new();
    for (s, (g, w)) in got.iter().zip(&want).enumerate() {
        for (b, (&f, &r)) in g.iter().zip(w).enumerate() {
            rows.push((s, b, f, r));
        }
    }
    Ok(rows)
}

pub fn accuracy_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, SweepError> {
    spec.validate()?;
    let lambda = spec.lambda();
    let mut out = Vec::new();
    for rep in 0..spec.repetitions {
        let system = spec.system(rep);
        for &p in &spec.orders {
            let ops = Arc::new(Operators::new(p, system.particles.box_length, spec.boundary).map_err(MahiError::from)?);
            for &d in &spec.depths {
                let config = FmmConfig::new(p, d).with_boundary(spec.boundary).with_precision(spec.precision);
                for (site, branch, force, reference) in deviation_rows(&system, &lambda, config, ops.clone())? {
                    let deviation = (force - reference) / reference;
                    if !deviation.is_finite() {
                        return Err(SweepError::NonFinite { p, d });
                    }
                    out.push(SweepRow { case: spec.case.name().into(), forms: spec.forms, rep, p, d, site, branch, force, reference, deviation });
                }
            }
        }
    }
    Ok(out)
}
