//! Far periodic images of the unit cell as a single multipole-to-local map.
//!
//! The operator holds `Λ_t^s = Σ_n I_t^s(n L)` over image shifts with
//! `|n|∞ >= 2`, summed in cubic shells. Applied to the cell multipole it gives
//! the local expansion of every distant image about the cell centre:
//! `L_j^k = (-1)^j Σ M_l^m Λ_{l+j}^{m+k}`. Orders `t <= 2` are zeroed: `t = 0`
//! diverges and `t = 1, 2` vanish by cubic symmetry; the dipole surface term
//! is handled separately.
//!
//! Two constructions are offered. [`LatticeOperator::converged`] uses the
//! 3×3×3 supercell renormalisation
//! `Λ_t = E_t + Σ_lk C_lk 3^{-(t+l+1)} Λ_{t+l}` (each level triples the
//! covered radius), and [`LatticeOperator::shells`] sums shells `2..=S`
//! explicitly.

use num_complex::Complex64;

use super::harmonics::{idx, irregular, len, m2l_dense, regular};
use super::FmmError;

/// How many extra orders beyond `2p` the renormalisation carries.
const GUARD_ORDERS: usize = 40;
const MAX_LEVELS: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub enum LatticeSummation {
    /// Renormalisation levels applied; covered radius grows as `3^levels`.
    Renormalized { levels: usize },
    /// Explicit cubic shells `2..=cap`.
    Shells { cap: usize },
}

#[derive(Clone, Debug)]
pub struct LatticeOperator {
    order: usize,
    box_length: f64,
    /// `Λ` in physical units for `t <= 2 * order`.
    table: Vec<Complex64>,
    summation: LatticeSummation,
    residual: f64,
}

fn chebyshev(n: [i32; 3]) -> i32 {
    n[0].abs().max(n[1].abs()).max(n[2].abs())
}

/// Unit-cell lattice sums over the shell range `lo..=hi` up to order `tmax`.
fn shell_sum(tmax: usize, lo: i32, hi: i32) -> Vec<Complex64> {
    let mut acc = vec![Complex64::new(0.0, 0.0); len(tmax)];
    let mut comp = vec![Complex64::new(0.0, 0.0); len(tmax)];
    let mut irr = vec![Complex64::new(0.0, 0.0); len(tmax)];
    for nz in -hi..=hi {
        for ny in -hi..=hi {
            for nx in -hi..=hi {
                let n = [nx, ny, nz];
                if chebyshev(n) < lo {
                    continue;
                }
                irregular(tmax, [nx as f64, ny as f64, nz as f64], &mut irr);
                for ((a, c), v) in acc.iter_mut().zip(comp.iter_mut()).zip(&irr) {
                    // Kahan on each component keeps the cancelling shells clean
                    let y = v - *c;
                    let t = *a + y;
                    *c = (t - *a) - y;
                    *a = t;
                }
            }
        }
    }
    acc
}

fn zero_low_orders(table: &mut [Complex64]) {
    for v in table.iter_mut().take(len(2)) {
        *v = Complex64::new(0.0, 0.0);
    }
}

fn to_physical(unit: &[Complex64], tmax: usize, box_length: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); len(tmax)];
    for t in 0..=tmax {
        let scale = box_length.powi(-(t as i32 + 1));
        for s in -(t as isize)..=(t as isize) {
            out[idx(t, s)] = unit[idx(t, s)] * scale;
        }
    }
    out
}

/// Magnitude of one nearest-image term of order `t` in a unit cell, `t!/2^{t+1}`.
fn natural_scale(t: usize) -> f64 {
    (1..=t).map(|k| k as f64).product::<f64>() / 2f64.powi(t as i32 + 1)
}

/// Renormalisation state in unit-cell coordinates.
struct Renormalizer {
    tmax: usize,
    explicit: Vec<Complex64>,
    supercell: Vec<Complex64>,
    pow3: Vec<f64>,
}

impl Renormalizer {
    fn new(tmax: usize) -> Self {
        let explicit = shell_sum(tmax, 2, 4);
        let mut supercell = vec![Complex64::new(0.0, 0.0); len(tmax)];
        let mut reg = vec![Complex64::new(0.0, 0.0); len(tmax)];
        for oz in -1..=1 {
            for oy in -1..=1 {
                for ox in -1..=1 {
                    regular(tmax, [ox as f64, oy as f64, oz as f64], &mut reg);
                    for (c, r) in supercell.iter_mut().zip(&reg) {
                        *c += r.conj();
                    }
                }
            }
        }
        let pow3 = (0..=2 * tmax + 2).map(|k| 3f64.powi(-(k as i32))).collect();
        Self { tmax, explicit, supercell, pow3 }
    }

    /// One level: `Λ' = E + C ⊗ scale(Λ)`; returns the largest block-relative
    /// change over orders `t <= watch`.
    fn step(&self, cur: &[Complex64], next: &mut [Complex64], watch: usize) -> f64 {
        let tmax = self.tmax;
        let mut change: f64 = 0.0;
        for t in 3..=tmax {
            let ti = t as isize;
            let mut block_norm = 0.0;
            let mut block_diff = 0.0;
            for s in 0..=ti {
                let mut acc = self.explicit[idx(t, s)];
                for l in 0..=(tmax - t) {
                    let f = self.pow3[t + l + 1];
                    let li = l as isize;
                    let mut inner = Complex64::new(0.0, 0.0);
                    for k in -li..=li {
                        let sk = s + k;
                        if sk.unsigned_abs() > t + l {
                            continue;
                        }
                        inner += self.supercell[idx(l, k)] * cur[idx(t + l, sk)];
                    }
                    acc += inner * f;
                }
                block_norm += acc.norm_sqr();
                block_diff += (acc - cur[idx(t, s)]).norm_sqr();
                next[idx(t, s)] = acc;
                if s > 0 {
                    let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
                    next[idx(t, -s)] = acc.conj() * sign;
                }
            }
            if t <= watch {
                change = change.max(block_diff.sqrt() / natural_scale(t).max(block_norm.sqrt()));
            }
        }
        change
    }
}

impl LatticeOperator {
    /// Renormalised lattice sum iterated until one more level changes every
    /// order block by less than `tolerance` (relative).
    pub fn converged(order: usize, box_length: f64, tolerance: f64) -> Result<Self, FmmError> {
        let watch = 2 * order;
        let tmax = watch + GUARD_ORDERS;
        let ren = Renormalizer::new(tmax);
        let mut cur = ren.explicit.clone();
        zero_low_orders(&mut cur);
        let mut next = cur.clone();
        let mut residual = f64::INFINITY;
        for level in 1..=MAX_LEVELS {
            residual = ren.step(&cur, &mut next, watch);
            std::mem::swap(&mut cur, &mut next);
            if residual < tolerance {
                let table = to_physical(&cur[..len(watch)], watch, box_length);
                return Ok(Self {
                    order,
                    box_length,
                    table,
                    summation: LatticeSummation::Renormalized { levels: level },
                    residual,
                });
            }
        }
        Err(FmmError::LatticeNotConverged { residual })
    }

    /// Renormalised lattice sum with a fixed number of supercell levels.
    /// Level 0 covers shells `2..=4`, level `k` covers `2..=R_k` with
    /// `R_k = 3 R_{k-1} + 1`.
    pub fn with_levels(order: usize, box_length: f64, levels: usize) -> Self {
        let watch = 2 * order;
        let tmax = watch + GUARD_ORDERS;
        let ren = Renormalizer::new(tmax);
        let mut cur = ren.explicit.clone();
        zero_low_orders(&mut cur);
        let mut next = cur.clone();
        let mut residual = f64::NAN;
        for _ in 0..levels {
            residual = ren.step(&cur, &mut next, watch);
            std::mem::swap(&mut cur, &mut next);
        }
        Self {
            order,
            box_length,
            table: to_physical(&cur[..len(watch)], watch, box_length),
            summation: LatticeSummation::Renormalized { levels },
            residual,
        }
    }

    /// Explicit sum over image shells `2 <= |n|∞ <= cap`.
    pub fn shells(order: usize, box_length: f64, cap: usize) -> Self {
        let tmax = 2 * order;
        let mut unit = if cap >= 2 {
            shell_sum(tmax, 2, cap as i32)
        } else {
            vec![Complex64::new(0.0, 0.0); len(tmax)]
        };
        zero_low_orders(&mut unit);
        Self {
            order,
            box_length,
            table: to_physical(&unit, tmax, box_length),
            summation: LatticeSummation::Shells { cap },
            residual: f64::NAN,
        }
    }

    /// Outermost shell covered after `levels` renormalisation levels.
    pub fn radius_after(levels: usize) -> usize {
        (0..levels).fold(4, |r, _| 3 * r + 1)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn box_length(&self) -> f64 {
        self.box_length
    }

    pub fn summation(&self) -> &LatticeSummation {
        &self.summation
    }

    /// Block-relative change of the last renormalisation level (NaN for
    /// explicit shells).
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `Λ_t^s` in physical units.
    pub fn entry(&self, t: usize, s: isize) -> Complex64 {
        self.table[idx(t, s)]
    }

    /// Accumulates the lattice local of multipole `m` (about the cell centre)
    /// into `out`.
    pub fn apply(&self, m: &[Complex64], out: &mut [Complex64]) {
        m2l_dense(self.order, m, &self.table, out);
    }
}
