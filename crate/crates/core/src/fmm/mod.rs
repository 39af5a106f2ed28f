//! Fast multipole solver for cubic cells, periodic or open.

pub mod dipole;
pub mod harmonics;
pub mod lattice;
pub mod octree;
pub mod rotation;

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sum::Neumaier;
use harmonics::{idx, l2l, l2p, len, m2m, mirror, p2m, round_to_single};
use lattice::LatticeOperator;
use octree::{box_count, children, parent, Octree};
use rotation::{racah_scale, M2lWork, RotationM2l};

pub const MAX_ORDER: usize = 30;
pub const MAX_DEPTH: usize = 5;
/// Default convergence tolerance for the renormalised lattice.
pub const LATTICE_TOLERANCE: f64 = 1e-14;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FmmError {
    #[error("multipole order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("tree depth {0} exceeds the supported maximum {MAX_DEPTH}")]
    DepthTooLarge(usize),
    #[error("box length must be positive and finite, got {0}")]
    BadBoxLength(f64),
    #[error("particle {index} at {pos:?} lies outside the open cell")]
    OutsideCell { index: usize, pos: [f64; 3] },
    #[error("expected {expected} charges, got {got}")]
    ChargeCount { expected: usize, got: usize },
    #[error("operators built for order {operators}, configuration asks for {config}")]
    OrderMismatch { operators: usize, config: usize },
    #[error("lattice sum did not converge (last relative change {residual:e})")]
    LatticeNotConverged { residual: f64 },
}

/// Treatment of image cells beyond the first shell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeMode {
    /// Only shifts with `|n|∞ <= 1`.
    Off,
    /// All shells, renormalised to convergence.
    Converged,
    /// Explicit shells `2..=cap`.
    Shells(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Isolated cell: no images.
    Open,
    Periodic { lattice: LatticeMode, dipole: bool },
}

impl Boundary {
    pub fn periodic() -> Self {
        Boundary::Periodic { lattice: LatticeMode::Converged, dipole: true }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Boundary::Periodic { .. })
    }

    pub fn dipole(&self) -> bool {
        matches!(self, Boundary::Periodic { dipole: true, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Double,
    /// Every expansion rounded to single precision after each operator.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmmConfig {
    pub order: usize,
    pub depth: usize,
    pub boundary: Boundary,
    pub precision: Precision,
}

impl FmmConfig {
    pub fn new(order: usize, depth: usize) -> Self {
        Self { order, depth, boundary: Boundary::periodic(), precision: Precision::Double }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<(), FmmError> {
        if self.order > MAX_ORDER {
            return Err(FmmError::OrderTooLarge(self.order));
        }
        if self.depth > MAX_DEPTH {
            return Err(FmmError::DepthTooLarge(self.depth));
        }
        Ok(())
    }
}

/// Translation tables that depend only on order, cell length and boundary.
#[derive(Debug)]
pub struct Operators {
    order: usize,
    box_length: f64,
    m2l: RotationM2l,
    lattice: Option<LatticeOperator>,
    scale: Vec<f64>,
}

impl Operators {
    pub fn new(order: usize, box_length: f64, boundary: Boundary) -> Result<Self, FmmError> {
        if order > MAX_ORDER {
            return Err(FmmError::OrderTooLarge(order));
        }
        let lattice = match boundary {
            Boundary::Open | Boundary::Periodic { lattice: LatticeMode::Off, .. } => None,
            Boundary::Periodic { lattice: LatticeMode::Converged, .. } => {
                Some(LatticeOperator::converged(order, box_length, LATTICE_TOLERANCE)?)
            }
            Boundary::Periodic { lattice: LatticeMode::Shells(cap), .. } => {
                Some(LatticeOperator::shells(order, box_length, cap))
            }
        };
        Ok(Self { order, box_length, m2l: RotationM2l::new(order), lattice, scale: racah_scale(order) })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lattice(&self) -> Option<&LatticeOperator> {
        self.lattice.as_ref()
    }
}

/// Output of one solve. Per-particle arrays are in input order.
#[derive(Clone, Debug)]
pub struct Solution {
    /// Total potential `Ṽ_i` at each particle (near + far + surface).
    pub potentials: Vec<f64>,
    /// Gradient of `Ṽ` at each particle, when requested.
    pub gradients: Option<Vec<[f64; 3]>>,
    /// `½ Σ q_i Ṽ_i`.
    pub energy: f64,
    pub near_energy: f64,
    pub far_energy: f64,
    pub dipole_energy: f64,
    /// Cell dipole about the centre.
    pub dipole: [f64; 3],
    /// Cell multipole about the centre.
    pub root_multipole: Vec<Complex64>,
}

/// A configured solver for a fixed particle geometry.
#[derive(Clone, Debug)]
pub struct Fmm {
    config: FmmConfig,
    box_length: f64,
    positions: Vec<[f64; 3]>,
    tree: Octree,
    ops: Arc<Operators>,
}

/// Wraps a coordinate into `[0, L)`.
pub fn wrap(x: f64, box_length: f64) -> f64 {
    let r = x.rem_euclid(box_length);
    if r >= box_length || r == 0.0 {
        0.0
    } else {
        r
    }
}

impl Fmm {
    pub fn new(positions: &[[f64; 3]], box_length: f64, config: FmmConfig) -> Result<Self, FmmError> {
        config.validate()?;
        if !(box_length > 0.0 && box_length.is_finite()) {
            return Err(FmmError::BadBoxLength(box_length));
        }
        let ops = Arc::new(Operators::new(config.order, box_length, config.boundary)?);
        Self::with_operators(positions, box_length, config, ops)
    }

    /// Reuses prebuilt translation tables.
    pub fn with_operators(
        positions: &[[f64; 3]],
        box_length: f64,
        config: FmmConfig,
        ops: Arc<Operators>,
    ) -> Result<Self, FmmError> {
        config.validate()?;
        if ops.order != config.order {
            return Err(FmmError::OrderMismatch { operators: ops.order, config: config.order });
        }
        if !(box_length > 0.0 && box_length.is_finite()) || ops.box_length != box_length {
            return Err(FmmError::BadBoxLength(box_length));
        }
        let periodic = config.boundary.is_periodic();
        let mut pos = Vec::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            if periodic {
                pos.push(p.map(|x| wrap(x, box_length)));
            } else {
                if p.iter().any(|&x| !(0.0..box_length).contains(&x)) {
                    return Err(FmmError::OutsideCell { index: i, pos: *p });
                }
                pos.push(*p);
            }
        }
        let tree = Octree::new(&pos, box_length, config.depth, periodic);
        Ok(Self { config, box_length, positions: pos, tree, ops })
    }

    pub fn config(&self) -> &FmmConfig {
        &self.config
    }

    pub fn tree(&self) -> &Octree {
        &self.tree
    }

    pub fn operators(&self) -> &Arc<Operators> {
        &self.ops
    }

    pub fn box_length(&self) -> f64 {
        self.box_length
    }

    /// Positions as used by the solver (wrapped in periodic mode).
    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn center(&self) -> [f64; 3] {
        [self.box_length / 2.0; 3]
    }

    fn finish(&self, v: &mut [Complex64]) {
        if self.config.precision == Precision::Single {
            round_to_single(v);
        }
    }

    /// Multipoles of every box at every level, about box centres.
    pub fn upward(&self, charges: &[f64]) -> Vec<Vec<Complex64>> {
        let p = self.config.order;
        let d = self.config.depth;
        let n = len(p);
        let mut levels: Vec<Vec<Complex64>> = (0..=d).map(|l| vec![Complex64::new(0.0, 0.0); box_count(l) * n]).collect();
        levels[d].par_chunks_mut(n).enumerate().for_each(|(leaf, out)| {
            let parts = self.tree.leaf_particles(leaf);
            if parts.is_empty() {
                return;
            }
            let pts: Vec<[f64; 3]> = parts.iter().map(|&i| self.positions[i]).collect();
            let qs: Vec<f64> = parts.iter().map(|&i| charges[i]).collect();
            p2m(p, self.tree.center(d, leaf), &pts, &qs, out);
            self.finish(out);
        });
        for level in (0..d).rev() {
            let (upper, lower) = levels.split_at_mut(level + 1);
            let child_level = &lower[0];
            upper[level].par_chunks_mut(n).enumerate().for_each(|(b, out)| {
                if !self.tree.occupied(level, b) {
                    return;
                }
                let c = self.tree.center(level, b);
                for ch in children(level, b) {
                    if !self.tree.occupied(level + 1, ch) {
                        continue;
                    }
                    let cc = self.tree.center(level + 1, ch);
                    m2m(p, &child_level[ch * n..(ch + 1) * n], harmonics::sub(cc, c), out);
                }
                self.finish(out);
            });
        }
        levels
    }

    /// Local expansions of every box at every level.
    pub fn downward(&self, multipoles: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let p = self.config.order;
        let d = self.config.depth;
        let n = len(p);
        let mut locals: Vec<Vec<Complex64>> = (0..=d).map(|l| vec![Complex64::new(0.0, 0.0); box_count(l) * n]).collect();
        if let Some(lat) = &self.ops.lattice {
            lat.apply(&multipoles[0], &mut locals[0]);
            self.finish(&mut locals[0]);
        }
        let scale = &self.ops.scale;
        for level in 1..=d {
            let w = self.tree.width(level);
            let wpow: Vec<f64> = (0..=p + 1).map(|k| w.powi(-(k as i32))).collect();
            // Racah-normalised unit-width multipoles for this level
            let mut mhat = vec![Complex64::new(0.0, 0.0); box_count(level) * n];
            mhat.par_chunks_mut(n).enumerate().for_each(|(b, out)| {
                if !self.tree.occupied(level, b) {
                    return;
                }
                let src = &multipoles[level][b * n..(b + 1) * n];
                for l in 0..=p {
                    for m in -(l as isize)..=(l as isize) {
                        let i = idx(l, m);
                        out[i] = src[i] * (scale[i] * wpow[l]);
                    }
                }
            });
            let (upper, lower) = locals.split_at_mut(level);
            let parent_locals = &upper[level - 1];
            let this = &mut lower[0];
            this.par_chunks_mut(n).enumerate().for_each_init(
                || (M2lWork::new(p), vec![Complex64::new(0.0, 0.0); n]),
                |(work, acc), (b, out)| {
                    if !self.tree.occupied(level, b) {
                        return;
                    }
                    let pb = parent(level, b);
                    let pc = self.tree.center(level - 1, pb);
                    let c = self.tree.center(level, b);
                    l2l(p, &parent_locals[pb * n..(pb + 1) * n], harmonics::sub(c, pc), out);
                    acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    let mut any = false;
                    for f in self.tree.interaction_list(level, b) {
                        if !self.tree.occupied(level, f.source.index) {
                            continue;
                        }
                        let s = f.source.index;
                        self.ops.m2l.apply(f.offset, &mhat[s * n..(s + 1) * n], acc, work);
                        any = true;
                    }
                    if any {
                        mirror(p, acc);
                        for j in 0..=p {
                            for k in -(j as isize)..=(j as isize) {
                                let i = idx(j, k);
                                out[i] += acc[i] * (scale[i] * wpow[j + 1]);
                            }
                        }
                    }
                    self.finish(out);
                },
            );
        }
        locals
    }

    /// Full solve: potentials at every particle and the energy split.
    pub fn solve(&self, charges: &[f64], want_gradients: bool) -> Result<Solution, FmmError> {
        if charges.len() != self.positions.len() {
            return Err(FmmError::ChargeCount { expected: self.positions.len(), got: charges.len() });
        }
        let p = self.config.order;
        let d = self.config.depth;
        let n = len(p);
        let multipoles = self.upward(charges);
        let locals = self.downward(&multipoles);
        let leaf_locals = &locals[d];
        let l_cell = self.box_length;
        let nleaf = box_count(d);

        // per leaf: (near, far, gradient) in canonical order
        let per_leaf: Vec<Vec<(f64, f64, [f64; 3])>> = (0..nleaf)
            .into_par_iter()
            .map_init(
                || vec![Complex64::new(0.0, 0.0); n],
                |scratch, leaf| {
                    let parts = self.tree.leaf_particles(leaf);
                    if parts.is_empty() {
                        return Vec::new();
                    }
                    let c = self.tree.center(d, leaf);
                    let local = &leaf_locals[leaf * n..(leaf + 1) * n];
                    let nbrs = self.tree.neighbors(d, leaf);
                    parts
                        .iter()
                        .map(|&i| {
                            let ri = self.positions[i];
                            let (far, gfar) = l2p(p, local, harmonics::sub(ri, c), scratch);
                            let mut near = 0.0;
                            let mut g = gfar;
                            for nb in &nbrs {
                                let sh = nb.shift.map(|s| s as f64 * l_cell);
                                let self_box = nb.shift == [0; 3];
                                for &j in self.tree.leaf_particles(nb.index) {
                                    if self_box && j == i {
                                        continue;
                                    }
                                    let rj = self.positions[j];
                                    let dx = ri[0] - rj[0] - sh[0];
                                    let dy = ri[1] - rj[1] - sh[1];
                                    let dz = ri[2] - rj[2] - sh[2];
                                    let r2 = dx * dx + dy * dy + dz * dz;
                                    let inv = 1.0 / r2.sqrt();
                                    let qv = charges[j] * inv;
                                    near += qv;
                                    if want_gradients {
                                        let f = qv * inv * inv;
                                        g[0] -= f * dx;
                                        g[1] -= f * dy;
                                        g[2] -= f * dz;
                                    }
                                }
                            }
                            (near, far, g)
                        })
                        .collect()
                },
            )
            .collect();

        let center = self.center();
        let dip_on = self.config.boundary.dipole();
        let mu = dipole::dipole_moment(center, &self.positions, charges);
        let kcoef = dipole::surface_coefficient(l_cell);
        let np = self.positions.len();
        let mut potentials = vec![0.0; np];
        let mut gradients = if want_gradients { Some(vec![[0.0; 3]; np]) } else { None };
        let mut e_near = Neumaier::new();
        let mut e_far = Neumaier::new();
        let mut e_dip = Neumaier::new();
        let mut e_tot = Neumaier::new();
        for (leaf, vals) in per_leaf.iter().enumerate() {
            for (&i, &(near, far, g)) in self.tree.leaf_particles(leaf).iter().zip(vals) {
                let ri = self.positions[i];
                let (dip, gdip) = if dip_on {
                    let rel = harmonics::sub(ri, center);
                    (-kcoef * (mu[0] * rel[0] + mu[1] * rel[1] + mu[2] * rel[2]), [-kcoef * mu[0], -kcoef * mu[1], -kcoef * mu[2]])
                } else {
                    (0.0, [0.0; 3])
                };
                let v = near + far + dip;
                potentials[i] = v;
                if let Some(gr) = gradients.as_mut() {
                    gr[i] = [g[0] + gdip[0], g[1] + gdip[1], g[2] + gdip[2]];
                }
                let q = charges[i];
                e_near.add(0.5 * q * near);
                e_far.add(0.5 * q * far);
                e_dip.add(0.5 * q * dip);
                e_tot.add(0.5 * q * v);
            }
        }
        Ok(Solution {
            potentials,
            gradients,
            energy: e_tot.value(),
            near_energy: e_near.value(),
            far_energy: e_far.value(),
            dipole_energy: e_dip.value(),
            dipole: mu,
            root_multipole: multipoles[0].clone(),
        })
    }
}

/// Root-centred multipole of a charge set (positions as used by the solver).
pub fn cell_multipole(order: usize, center: [f64; 3], positions: &[[f64; 3]], charges: &[f64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); len(order)];
    p2m(order, center, positions, charges, &mut out);
    out
}
