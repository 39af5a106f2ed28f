//! Particles, titratable sites and λ state, plus the JSON system file.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmm::wrap;
use crate::lambda::{self, MAX_LAMBDAS};

pub const MAX_FORMS: usize = 1 << MAX_LAMBDAS;

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub box_length: f64,
    pub positions: Vec<[f64; 3]>,
    /// Charge of every particle. Entries of site particles are placeholders;
    /// their charges come from the site's forms.
    pub charges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TitratableSite {
    pub indices: Vec<usize>,
    /// `forms[ρ][i]` is the charge of `indices[i]` in form `ρ`.
    pub forms: Vec<Vec<f64>>,
}

impl TitratableSite {
    pub fn num_forms(&self) -> usize {
        self.forms.len()
    }

    pub fn num_lambda(&self) -> usize {
        self.forms.len().trailing_zeros() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteLambda {
    pub values: Vec<f64>,
    pub velocities: Vec<f64>,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LambdaState {
    pub sites: Vec<SiteLambda>,
}

impl LambdaState {
    /// Every λ at `value`, at rest, with the given mass.
    pub fn uniform(sites: &[TitratableSite], value: f64, mass: f64) -> Self {
        Self {
            sites: sites
                .iter()
                .map(|s| SiteLambda { values: vec![value; s.num_lambda()], velocities: vec![0.0; s.num_lambda()], mass })
                .collect(),
        }
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.sites.iter().map(|s| s.values.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Vec<f64>]) {
        for (s, v) in self.sites.iter_mut().zip(values) {
            s.values.clone_from(v);
        }
    }
}

/// A complete system: particles, sites and λ state.
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub particles: ParticleSystem,
    pub sites: Vec<TitratableSite>,
    pub lambda: LambdaState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NonPositiveBox,
    PositionOutsideBox { particle: usize },
    NonFinite { particle: usize },
    IndexOutOfRange { site: usize, index: usize },
    DuplicateIndex { site: usize, index: usize },
    SiteOverlap { index: usize, first: usize, second: usize },
    TooFewForms { site: usize, forms: usize },
    FormCountNotPowerOfTwo { site: usize, forms: usize },
    TooManyForms { site: usize, forms: usize },
    FormLength { site: usize, form: usize, expected: usize, got: usize },
    LambdaSiteCount { expected: usize, got: usize },
    LambdaLength { site: usize, expected: usize, got: usize },
    NonPositiveMass { site: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NonPositiveBox => write!(f, "box length must be positive"),
            PositionOutsideBox { particle } => write!(f, "particle {particle} lies outside the box"),
            NonFinite { particle } => write!(f, "particle {particle} has a non-finite coordinate or charge"),
            IndexOutOfRange { site, index } => write!(f, "site {site} references missing particle {index}"),
            DuplicateIndex { site, index } => write!(f, "site {site} lists particle {index} twice"),
            SiteOverlap { index, first, second } => {
                write!(f, "site overlap: particle {index} belongs to sites {first} and {second}")
            }
            TooFewForms { site, forms } => write!(f, "site {site} has {forms} forms, at least 2 required"),
            FormCountNotPowerOfTwo { site, forms } => {
                write!(f, "form count not a power of two: site {site} has {forms} forms")
            }
            TooManyForms { site, forms } => write!(f, "site {site} has {forms} forms, at most {MAX_FORMS} supported"),
            FormLength { site, form, expected, got } => {
                write!(f, "site {site} form {form} has {got} charges, expected {expected}")
            }
            LambdaSiteCount { expected, got } => write!(f, "λ state covers {got} sites, expected {expected}"),
            LambdaLength { site, expected, got } => write!(f, "site {site} has {got} λ values, expected {expected}"),
            NonPositiveMass { site } => write!(f, "site {site} has a non-positive λ mass"),
        }
    }
}

/// Every violated invariant; empty iff the system is valid.
pub fn validate_system(system: &ParticleSystem, sites: &[TitratableSite], lambda: Option<&LambdaState>) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = system.positions.len();
    if !(system.box_length > 0.0 && system.box_length.is_finite()) {
        out.push(Violation::NonPositiveBox);
    }
    for (i, p) in system.positions.iter().enumerate() {
        if p.iter().any(|x| !x.is_finite()) || !system.charges.get(i).is_some_and(|q| q.is_finite()) {
            out.push(Violation::NonFinite { particle: i });
        } else if p.iter().any(|&x| x < 0.0 || x >= system.box_length) {
            out.push(Violation::PositionOutsideBox { particle: i });
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (s, site) in sites.iter().enumerate() {
        let mut seen = std::collections::BTreeSet::new();
        for &i in &site.indices {
            if i >= n {
                out.push(Violation::IndexOutOfRange { site: s, index: i });
                continue;
            }
            if !seen.insert(i) {
                out.push(Violation::DuplicateIndex { site: s, index: i });
                continue;
            }
            match owner[i] {
                Some(first) => out.push(Violation::SiteOverlap { index: i, first, second: s }),
                None => owner[i] = Some(s),
            }
        }
        let f = site.forms.len();
        if f < 2 {
            out.push(Violation::TooFewForms { site: s, forms: f });
        } else if !f.is_power_of_two() {
            out.push(Violation::FormCountNotPowerOfTwo { site: s, forms: f });
        } else if f > MAX_FORMS {
            out.push(Violation::TooManyForms { site: s, forms: f });
        }
        for (r, form) in site.forms.iter().enumerate() {
            if form.len() != site.indices.len() {
                out.push(Violation::FormLength { site: s, form: r, expected: site.indices.len(), got: form.len() });
            }
        }
    }
    if let Some(lam) = lambda {
        if lam.sites.len() != sites.len() {
            out.push(Violation::LambdaSiteCount { expected: sites.len(), got: lam.sites.len() });
        }
        for (s, (site, l)) in sites.iter().zip(&lam.sites).enumerate() {
            let expected = site.num_lambda();
            if l.values.len() != expected || l.velocities.len() != expected {
                out.push(Violation::LambdaLength { site: s, expected, got: l.values.len().min(l.velocities.len()) });
            }
            if !(l.mass > 0.0) {
                out.push(Violation::NonPositiveMass { site: s });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("site {site}: {got} weights for {expected} forms")]
    WeightCount { site: usize, expected: usize, got: usize },
    #[error("{got} weight vectors for {expected} sites")]
    SiteCount { expected: usize, got: usize },
}

/// Charges with every site's forms blended by `weights[site][ρ]`.
pub fn scale_charges(system: &ParticleSystem, sites: &[TitratableSite], weights: &[Vec<f64>]) -> Result<Vec<f64>, ScaleError> {
    if weights.len() != sites.len() {
        return Err(ScaleError::SiteCount { expected: sites.len(), got: weights.len() });
    }
    let mut q = system.charges.clone();
    for (s, (site, w)) in sites.iter().zip(weights).enumerate() {
        if w.len() != site.forms.len() {
            return Err(ScaleError::WeightCount { site: s, expected: site.forms.len(), got: w.len() });
        }
        for (a, &i) in site.indices.iter().enumerate() {
            q[i] = site.forms.iter().zip(w).map(|(form, wr)| wr * form[a]).sum();
        }
    }
    Ok(q)
}

/// Charges with every site fixed to one form.
pub fn assignment_charges(system: &ParticleSystem, sites: &[TitratableSite], forms: &[usize]) -> Vec<f64> {
    let mut q = system.charges.clone();
    for (site, &rho) in sites.iter().zip(forms) {
        for (a, &i) in site.indices.iter().enumerate() {
            q[i] = site.forms[rho][a];
        }
    }
    q
}

impl System {
    pub fn validate(&self) -> Vec<Violation> {
        validate_system(&self.particles, &self.sites, Some(&self.lambda))
    }

    /// λ̃ per site from the current λ values.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.lambda
            .sites
            .iter()
            .map(|s| lambda::expand_weights(&s.values).expect("validated λ count"))
            .collect()
    }

    pub fn scaled_charges(&self) -> Vec<f64> {
        scale_charges(&self.particles, &self.sites, &self.weights()).expect("validated system")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SystemError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let file: SystemFile = serde_json::from_str(text)?;
        let system = file.into_system();
        let violations = system.validate();
        if let Some(first) = violations.into_iter().next() {
            return Err(SystemError::Invalid(first));
        }
        Ok(system)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&SystemFile::from_system(self)).expect("plain data serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SystemError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn num_forms_total(&self) -> usize {
        self.sites.iter().map(|s| s.num_forms()).sum()
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid system: {0}")]
    Invalid(Violation),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParticleRecord {
    pos: [f64; 3],
    q: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteRecord {
    indices: Vec<usize>,
    forms: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    box_length_nm: f64,
    particles: Vec<ParticleRecord>,
    #[serde(default)]
    sites: Vec<SiteRecord>,
    #[serde(default)]
    lambda: Vec<SiteLambda>,
}

impl SystemFile {
    fn into_system(self) -> System {
        let l = self.box_length_nm;
        let wrap_ok = l > 0.0 && l.is_finite();
        let positions = self
            .particles
            .iter()
            .map(|p| if wrap_ok { p.pos.map(|x| if x.is_finite() { wrap(x, l) } else { x }) } else { p.pos })
            .collect();
        let charges = self.particles.iter().map(|p| p.q).collect();
        let sites: Vec<TitratableSite> =
            self.sites.into_iter().map(|s| TitratableSite { indices: s.indices, forms: s.forms }).collect();
        let lambda = if self.lambda.is_empty() && !sites.is_empty() {
            LambdaState::uniform(&sites, 0.5, 1.0)
        } else {
            LambdaState { sites: self.lambda }
        };
        System { particles: ParticleSystem { box_length: l, positions, charges }, sites, lambda }
    }

    fn from_system(s: &System) -> Self {
        SystemFile {
            box_length_nm: s.particles.box_length,
            particles: s
                .particles
                .positions
                .iter()
                .zip(&s.particles.charges)
                .map(|(&pos, &q)| ParticleRecord { pos, q })
                .collect(),
            sites: s.sites.iter().map(|t| SiteRecord { indices: t.indices.clone(), forms: t.forms.clone() }).collect(),
            lambda: s.lambda.sites.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_atom_site() -> System {
        System {
            particles: ParticleSystem {
                box_length: 3.0,
                positions: vec![[0.1, 0.2, 0.3], [1.0, 1.0, 1.0], [1.1, 1.0, 1.0]],
                charges: vec![0.4, 0.0, 0.0],
            },
            sites: vec![TitratableSite { indices: vec![1, 2], forms: vec![vec![0.5, -0.5], vec![0.0, 0.0]] }],
            lambda: LambdaState { sites: vec![SiteLambda { values: vec![0.25], velocities: vec![0.0], mass: 5.0 }] },
        }
    }

    #[test]
    fn minimal_file() {
        let s = System::from_json(r#"{"box_length_nm": 2.0, "particles": [{"pos": [0.5, 0.5, 0.5], "q": 1.0}]}"#).unwrap();
        assert_eq!(s.particles.positions.len(), 1);
        assert!(s.sites.is_empty());
    }

    #[test]
    fn two_form_site_has_one_lambda() {
        let s = two_atom_site();
        assert_eq!(s.sites[0].num_lambda(), 1);
        assert!(s.validate().is_empty());
    }

    #[test]
    fn scaling_examples() {
        let s = two_atom_site();
        let q = scale_charges(&s.particles, &s.sites, &[vec![0.75, 0.25]]).unwrap();
        assert_eq!(q, vec![0.4, 0.375, -0.375]);
        let q = scale_charges(&s.particles, &s.sites, &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(&q[1..], &[0.5, -0.5]);
        assert!(scale_charges(&s.particles, &s.sites, &[vec![1.0]]).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let s = two_atom_site();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        s.save(&path).unwrap();
        assert_eq!(System::load(&path).unwrap(), s);
    }

    #[test]
    fn coordinates_wrap_on_load() {
        let s = System::from_json(r#"{"box_length_nm": 2.0, "particles": [{"pos": [-0.5, 2.5, 4.0], "q": 1.0}]}"#).unwrap();
        assert_eq!(s.particles.positions[0], [1.5, 0.5, 0.0]);
    }

    #[test]
    fn violations_are_reported() {
        let mut s = two_atom_site();
        s.sites.push(TitratableSite { indices: vec![2, 0], forms: vec![vec![0.0, 0.0]; 3] });
        let v = validate_system(&s.particles, &s.sites, None);
        assert!(v.contains(&Violation::SiteOverlap { index: 2, first: 0, second: 1 }));
        assert!(v.contains(&Violation::FormCountNotPowerOfTwo { site: 1, forms: 3 }));
        assert!(v.iter().any(|x| x.to_string().starts_with("site overlap")));
        assert!(v.iter().any(|x| x.to_string().starts_with("form count not a power of two")));
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = System::from_json("{\n\"box_length_nm\": 1.0,\n\"particles\": [{\"pos\": [0,0], \"q\": 1}]}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_system_names_first_violation() {
        let err = System::from_json(r#"{"box_length_nm": 1.0, "particles": [{"pos": [0.1,0.1,0.1], "q": 1}], "sites": [{"indices": [0], "forms": [[1],[0],[0]]}], "lambda": [{"values": [0.5], "velocities": [0.0], "mass": 1.0}]}"#).unwrap_err();
        assert!(err.to_string().contains("power of two"), "{err}");
    }
}
