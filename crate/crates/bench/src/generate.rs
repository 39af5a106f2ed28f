//! Random benchmark systems.

use std::str::FromStr;

use mahi::fmm::wrap;
use mahi::system::{LambdaState, ParticleSystem, System, TitratableSite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Particles per nm³ used when no box length is given.
pub const DEFAULT_DENSITY: f64 = 100.0;
/// Diameter of the sphere holding a clustered site.
pub const SITE_DIAMETER: f64 = 0.5;
/// Atoms per system for each titratable site in scaling series.
pub const ATOMS_PER_SITE_RATIO: usize = 4000;
pub const DEFAULT_LAMBDA_MASS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Site atoms clustered in a small sphere.
    Typical,
    /// Site atoms uniform over the box.
    WorstCase,
}

impl FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "typical" => Ok(Self::Typical),
            "worst" | "worst-case" | "worst_case" => Ok(Self::WorstCase),
            _ => Err(format!("unknown case '{s}', expected typical or worst")),
        }
    }
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Self::Typical => "typical",
            Self::WorstCase => "worst",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub count: usize,
    pub atoms: usize,
    pub forms: usize,
}

impl Default for SiteSpec {
    fn default() -> Self {
        Self { count: 1, atoms: 10, forms: 2 }
    }
}

pub fn default_box_length(particles: usize) -> f64 {
    (particles.max(1) as f64 / DEFAULT_DENSITY).cbrt()
}

fn charge(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..=1.0)
}

fn point_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 3] {
    loop {
        let p = [0; 3].map(|_: i32| rng.random_range(-radius..radius));
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= radius * radius {
            return p;
        }
    }
}

/// Background particles first, then the sites' atoms in site order. Charges
/// of background particles and of every site form are uniform in `[-1, 1]`.
pub fn generate_random_system(n_background: usize, sites: SiteSpec, case: Distribution, box_length: Option<f64>, seed: u64) -> System {
    let total = n_background + sites.count * sites.atoms;
    let l = box_length.unwrap_or_else(|| default_box_length(total));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(total);
    let mut charges = Vec::with_capacity(total);
    for _ in 0..n_background {
        positions.push([0; 3].map(|_: i32| rng.random_range(0.0..l)));
        charges.push(charge(&mut rng));
    }
    let mut out_sites = Vec::with_capacity(sites.count);
    for _ in 0..sites.count {
        let start = positions.len();
        let centre = [0; 3].map(|_: i32| rng.random_range(0.0..l));
        for _ in 0..sites.atoms {
            let p = match case {
                Distribution::Typical => {
                    let d = point_in_ball(&mut rng, SITE_DIAMETER / 2.0);
                    [0, 1, 2].map(|k| wrap(centre[k] + d[k], l))
                }
                Distribution::WorstCase => [0; 3].map(|_: i32| rng.random_range(0.0..l)),
            };
            positions.push(p);
            charges.push(0.0);
        }
        let forms = (0..sites.forms).map(|_| (0..sites.atoms).map(|_| charge(&mut rng)).collect()).collect();
        out_sites.push(TitratableSite { indices: (start..start + sites.atoms).collect(), forms });
    }
    let lambda = LambdaState::uniform(&out_sites, 0.5, DEFAULT_LAMBDA_MASS);
    System { particles: ParticleSystem { box_length: l, positions, charges }, sites: out_sites, lambda }
}

/// `total` particles with one site of `atoms` atoms per 4000 particles.
pub fn scaling_system(total: usize, forms: usize, case: Distribution, seed: u64) -> System {
    let atoms = 10;
    let count = (total / ATOMS_PER_SITE_RATIO).max(1);
    let n_background = total.saturating_sub(count * atoms);
    generate_random_system(n_background, SiteSpec { count, atoms, forms }, case, None, seed)
}
