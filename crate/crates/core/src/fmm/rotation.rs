//! Rotation-accelerated multipole-to-local translation.
//!
//! Expansions are converted to Racah normalisation (`X̂ = s·X` for multipoles,
//! `X̂ = X/s` for locals, `s_lm = sqrt((l-m)!(l+m)!)`), rotated so the
//! translation vector lies on `+z`, translated coaxially, and rotated back.
//! Cost is `O(p³)` per translation instead of `O(p⁴)`.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;

use super::harmonics::{idx, len};

/// Wigner small-d matrices `d^l_{m'm}(β)` for all `l <= order`.
#[derive(Clone, Debug)]
pub struct WignerSmall {
    order: usize,
    data: Vec<f64>,
}

fn block_start(l: usize) -> usize {
    (0..l).map(|k| (2 * k + 1) * (2 * k + 1)).sum()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn jacobi(n: usize, a: f64, b: f64, x: f64) -> f64 {
    let mut p0 = 1.0;
    if n == 0 {
        return p0;
    }
    let mut p1 = (a + 1.0) + (a + b + 2.0) * (x - 1.0) / 2.0;
    for k in 2..=n {
        let k = k as f64;
        let c = 2.0 * k + a + b;
        let a1 = 2.0 * k * (k + a + b) * (c - 2.0);
        let a2 = (c - 1.0) * (c * (c - 2.0) * x + a * a - b * b);
        let a3 = 2.0 * (k + a - 1.0) * (k + b - 1.0) * c;
        let p2 = (a2 * p1 - a3 * p0) / a1;
        p0 = p1;
        p1 = p2;
    }
    p1
}

fn small_d(j: i64, mp: i64, m: i64, beta: f64) -> f64 {
    let cands = [(j + m, 0), (j - m, 1), (j + mp, 2), (j - mp, 3)];
    let (k, case) = cands.iter().copied().min_by_key(|c| c.0).unwrap();
    let (a, lam) = match case {
        0 => (mp - m, mp - m),
        1 => (m - mp, 0),
        2 => (m - mp, 0),
        _ => (mp - m, mp - m),
    };
    let b = 2 * j - 2 * k - a;
    let sign = if lam.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let norm = (binomial((2 * j - k) as usize, (k + a) as usize) / binomial((k + b) as usize, b as usize)).sqrt();
    let (s, c) = (beta / 2.0).sin_cos();
    sign * norm * s.powi(a as i32) * c.powi(b as i32) * jacobi(k as usize, a as f64, b as f64, beta.cos())
}

impl WignerSmall {
    pub fn new(order: usize, beta: f64) -> Self {
        let mut data = Vec::with_capacity(block_start(order + 1));
        for l in 0..=order {
            let li = l as i64;
            for mp in -li..=li {
                for m in -li..=li {
                    data.push(small_d(li, mp, m, beta));
                }
            }
        }
        Self { order, data }
    }

    /// Row `m'` of the degree-`l` block, indexed by `m + l`.
    #[inline]
    pub fn row(&self, l: usize, mp: isize) -> &[f64] {
        debug_assert!(l <= self.order);
        let w = 2 * l + 1;
        let start = block_start_cached(l) + (mp + l as isize) as usize * w;
        &self.data[start..start + w]
    }

    #[inline]
    pub fn get(&self, l: usize, mp: isize, m: isize) -> f64 {
        self.row(l, mp)[(m + l as isize) as usize]
    }
}

#[inline]
fn block_start_cached(l: usize) -> usize {
    // closed form of Σ_{k<l} (2k+1)²
    (4 * l * l * l - l) / 3
}

/// `sqrt((l-m)!(l+m)!)` for all `l <= order`, `m >= 0`, indexed like expansions.
pub fn racah_scale(order: usize) -> Vec<f64> {
    let fact = factorials(2 * order + 1);
    let mut out = vec![0.0; len(order)];
    for l in 0..=order {
        for m in -(l as isize)..=(l as isize) {
            let a = m.unsigned_abs();
            out[idx(l, m)] = (fact[l - a] * fact[l + a]).sqrt();
        }
    }
    out
}

pub fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

/// One integer offset direction's precomputed data.
#[derive(Clone, Debug)]
struct OffsetOp {
    phase: Vec<Complex64>,
    wigner: Arc<WignerSmall>,
    coax: Vec<f64>,
}

/// Rotation-based M2L for the integer offsets `o ∈ [-3,3]³`, `|o|∞ >= 2`,
/// in units of the box width, acting on Racah-normalised expansions.
#[derive(Clone, Debug)]
pub struct RotationM2l {
    order: usize,
    ops: Vec<Option<OffsetOp>>,
}

#[inline]
pub fn offset_slot(o: [i32; 3]) -> usize {
    ((o[0] + 3) + 7 * ((o[1] + 3) + 7 * (o[2] + 3))) as usize
}

fn coax_start(order: usize, k: usize) -> usize {
    (0..k).map(|kk| (order + 1 - kk) * (order + 1 - kk)).sum()
}

impl RotationM2l {
    pub fn new(order: usize) -> Self {
        let fact = factorials(2 * order + 1);
        let scale = racah_scale(order);
        let mut ops = vec![None; 343];
        let mut cache: HashMap<(i32, i32), Arc<WignerSmall>> = HashMap::new();
        for oz in -3..=3 {
            for oy in -3..=3 {
                for ox in -3..=3i32 {
                    let o = [ox, oy, oz];
                    if o.iter().map(|v| v.abs()).max().unwrap() < 2 {
                        continue;
                    }
                    let r2 = ox * ox + oy * oy + oz * oz;
                    let rho = (r2 as f64).sqrt();
                    let theta = (oz as f64 / rho).clamp(-1.0, 1.0).acos();
                    let phi = (oy as f64).atan2(ox as f64);
                    let wigner = cache
                        .entry((oz, r2))
                        .or_insert_with(|| Arc::new(WignerSmall::new(order, theta)))
                        .clone();
                    let phase = (0..=order).map(|m| Complex64::from_polar(1.0, m as f64 * phi)).collect();
                    let mut coax = Vec::with_capacity(coax_start(order, order + 1));
                    for k in 0..=order {
                        for j in k..=order {
                            for l in k..=order {
                                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                                let s = scale[idx(j, k as isize)] * scale[idx(l, k as isize)];
                                coax.push(sign * fact[l + j] / (s * rho.powi((l + j + 1) as i32)));
                            }
                        }
                    }
                    ops[offset_slot(o)] = Some(OffsetOp { phase, wigner, coax });
                }
            }
        }
        Self { order, ops }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Accumulates the translation of Racah multipole `src` across integer
    /// offset `o = c_local - c_multipole` into the Racah local `dst`. Only the
    /// `m >= 0` entries of `dst` are written; call [`super::harmonics::mirror`] afterwards.
    pub fn apply(&self, o: [i32; 3], src: &[Complex64], dst: &mut [Complex64], work: &mut M2lWork) {
        let op = self.ops[offset_slot(o)].as_ref().expect("offset outside the interaction stencil");
        let p = self.order;
        let w = &op.wigner;
        let a = &mut work.a;
        // phase: A_lm' = e^{i m' φ} M̂_lm'
        for l in 0..=p {
            for mp in 0..=l {
                let ph = op.phase[mp];
                let v = src[idx(l, mp as isize)] * ph;
                a[idx(l, mp as isize)] = v;
                if mp > 0 {
                    let s = if mp % 2 == 0 { 1.0 } else { -1.0 };
                    a[idx(l, -(mp as isize))] = v.conj() * s;
                }
            }
        }
        // rotate in: B_{l,-k} = Σ_{m'} d_{m',-k} A_lm'
        let b = &mut work.b;
        for l in 0..=p {
            let li = l as isize;
            let base = idx(l, -li);
            let al = &a[base..base + 2 * l + 1];
            for k in 0..=l {
                let mut acc = Complex64::new(0.0, 0.0);
                let col = (li - k as isize) as usize;
                for (t, av) in al.iter().enumerate() {
                    let mp = t as isize - li;
                    acc += av * w.row(l, mp)[col];
                }
                b[idx(l, k as isize)] = acc; // stores M̂'_{l,-k} at slot (l,k)
            }
        }
        // coaxial translation: L̂'_jk = Σ_l c(k,j,l) M̂'_{l,-k}
        let c = &mut work.c;
        let mut ci = 0;
        for k in 0..=p {
            for j in k..=p {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in k..=p {
                    acc += b[idx(l, k as isize)] * op.coax[ci];
                    ci += 1;
                }
                c[idx(j, k as isize)] = acc;
            }
        }
        for j in 1..=p {
            for k in 1..=j {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                c[idx(j, -(k as isize))] = c[idx(j, k as isize)].conj() * s;
            }
        }
        // rotate out: L̂_jm' = e^{i m' φ} Σ_k d_{m'k} L̂'_jk
        for j in 0..=p {
            let ji = j as isize;
            let base = idx(j, -ji);
            let cj = &c[base..base + 2 * j + 1];
            for mp in 0..=j {
                let row = w.row(j, mp as isize);
                let mut acc = Complex64::new(0.0, 0.0);
                for (cv, dv) in cj.iter().zip(row) {
                    acc += cv * dv;
                }
                dst[idx(j, mp as isize)] += acc * op.phase[mp];
            }
        }
    }
}

/// Scratch buffers for [`RotationM2l::apply`].
#[derive(Clone, Debug)]
pub struct M2lWork {
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
}

impl M2lWork {
    pub fn new(order: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); len(order)];
        Self { a: z.clone(), b: z.clone(), c: z }
    }
}
