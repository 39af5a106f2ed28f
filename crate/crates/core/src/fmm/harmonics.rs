//! Complex solid harmonics and the translation operators built on them.
//!
//! Conventions (Condon-Shortley phase included in `P_l^m`):
//!
//! ```text
//! R_l^m(r) = r^l       P_l^m(cos θ) e^{imφ} / (l+m)!     regular
//! I_l^m(r) = (l-m)!    P_l^m(cos θ) e^{imφ} / r^{l+1}    irregular
//! ```
//!
//! with `X_l^{-m} = (-1)^m conj(X_l^m)` for both families. A multipole about
//! `c` is `M_l^m = Σ q R_l^m(r - c)*`, its potential is `Σ M_l^m I_l^m(x - c)`.
//! A local expansion about `c` evaluates as `Σ L_l^m R_l^m(x - c)*`. The energy
//! of a charge set (multipole `M`) in a local field `L` about the same center
//! is the contraction `Σ M_l^m L_l^m`, which is real.

use num_complex::Complex64;

/// Flat index of `(l, m)` in a coefficient array, `-l <= m <= l`.
#[inline(always)]
pub const fn idx(l: usize, m: isize) -> usize {
    ((l * l + l) as isize + m) as usize
}

/// Number of coefficients for expansions up to and including `order`.
#[inline]
pub const fn len(order: usize) -> usize {
    (order + 1) * (order + 1)
}

#[inline(always)]
fn neg_m_sign(m: usize) -> f64 {
    if m.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Fills `out[idx(l,m)] = R_l^m(v)` for all `l <= order`.
pub fn regular(order: usize, v: [f64; 3], out: &mut [Complex64]) {
    debug_assert!(out.len() >= len(order));
    let [x, y, z] = v;
    let r2 = x * x + y * y + z * z;
    let xy = Complex64::new(x, y);
    out[0] = Complex64::new(1.0, 0.0);
    for l in 0..order {
        // diagonal
        let diag = out[idx(l, l as isize)];
        out[idx(l + 1, (l + 1) as isize)] = -xy * diag / (2.0 * (l + 1) as f64);
        for m in 0..=l {
            let lm = out[idx(l, m as isize)];
            let lm1 = if m < l {
                out[idx(l - 1, m as isize)]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let denom = ((l + 1 + m) * (l + 1 - m)) as f64;
            out[idx(l + 1, m as isize)] = ((2 * l + 1) as f64 * z * lm - r2 * lm1) / denom;
        }
    }
    mirror(order, out);
}

/// Fills `out[idx(l,m)] = I_l^m(v)` for all `l <= order`. `v` must be nonzero.
pub fn irregular(order: usize, v: [f64; 3], out: &mut [Complex64]) {
    debug_assert!(out.len() >= len(order));
    let [x, y, z] = v;
    let r2 = x * x + y * y + z * z;
    let inv_r2 = 1.0 / r2;
    let xy = Complex64::new(x, y);
    out[0] = Complex64::new(1.0 / r2.sqrt(), 0.0);
    for l in 0..order {
        let diag = out[idx(l, l as isize)];
        out[idx(l + 1, (l + 1) as isize)] = -xy * diag * ((2 * l + 1) as f64 * inv_r2);
        for m in 0..=l {
            let lm = out[idx(l, m as isize)];
            let lm1 = if m < l {
                out[idx(l - 1, m as isize)]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let c = (l * l - m * m) as f64;
            out[idx(l + 1, m as isize)] = ((2 * l + 1) as f64 * z * lm - c * lm1) * inv_r2;
        }
    }
    mirror(order, out);
}

/// Fills negative-`m` entries from the non-negative ones.
pub fn mirror(order: usize, out: &mut [Complex64]) {
    for l in 1..=order {
        for m in 1..=l {
            let v = out[idx(l, m as isize)].conj() * neg_m_sign(m);
            out[idx(l, -(m as isize))] = v;
        }
    }
}

/// Rounds every coefficient to single precision.
pub fn round_to_single(coeffs: &mut [Complex64]) {
    for c in coeffs {
        *c = Complex64::new(c.re as f32 as f64, c.im as f32 as f64);
    }
}

/// Accumulates the multipole of point charges about `center` into `out`.
pub fn p2m(order: usize, center: [f64; 3], points: &[[f64; 3]], charges: &[f64], out: &mut [Complex64]) {
    let mut r = vec![Complex64::new(0.0, 0.0); len(order)];
    for (p, &q) in points.iter().zip(charges) {
        if q == 0.0 {
            continue;
        }
        regular(order, sub(*p, center), &mut r);
        for (o, v) in out.iter_mut().zip(&r) {
            *o += q * v.conj();
        }
    }
}

/// Multipole-to-multipole: shifts `src` (centered at `c_src`) to `c_dst`,
/// accumulating into `dst`. `shift = c_src - c_dst`.
pub fn m2m(order: usize, src: &[Complex64], shift: [f64; 3], dst: &mut [Complex64]) {
    let mut r = vec![Complex64::new(0.0, 0.0); len(order)];
    regular(order, shift, &mut r);
    for c in r.iter_mut() {
        *c = c.conj();
    }
    for l in 0..=order {
        for m in -(l as isize)..=(l as isize) {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..=l {
                let lj = l - j;
                for k in -(j as isize)..=(j as isize) {
                    let mk = m - k;
                    if mk.unsigned_abs() > lj {
                        continue;
                    }
                    acc += r[idx(j, k)] * src[idx(lj, mk)];
                }
            }
            dst[idx(l, m)] += acc;
        }
    }
}

/// Dense multipole-to-local translation, accumulating into `dst`.
///
/// `irr` holds `I(T)` up to order `2 * order` with `T = c_local - c_multipole`.
pub fn m2l_dense(order: usize, src: &[Complex64], irr: &[Complex64], dst: &mut [Complex64]) {
    for j in 0..=order {
        let sign = neg_m_sign(j);
        for k in 0..=(j as isize) {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..=order {
                let t = l + j;
                for m in -(l as isize)..=(l as isize) {
                    acc += src[idx(l, m)] * irr[idx(t, m + k)];
                }
            }
            dst[idx(j, k)] += sign * acc;
        }
    }
    mirror(order, dst);
}

/// Local-to-local: re-expands `src` (about `c_old`) about `c_new`,
/// accumulating into `dst`. `shift = c_new - c_old`.
pub fn l2l(order: usize, src: &[Complex64], shift: [f64; 3], dst: &mut [Complex64]) {
    let mut r = vec![Complex64::new(0.0, 0.0); len(order)];
    regular(order, shift, &mut r);
    for c in r.iter_mut() {
        *c = c.conj();
    }
    for j in 0..=order {
        for k in -(j as isize)..=(j as isize) {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in j..=order {
                let lj = l - j;
                for m in -(l as isize)..=(l as isize) {
                    let mk = m - k;
                    if mk.unsigned_abs() > lj {
                        continue;
                    }
                    acc += src[idx(l, m)] * r[idx(lj, mk)];
                }
            }
            dst[idx(j, k)] += acc;
        }
    }
}

/// Evaluates a local expansion at offset `y` from its center: potential and
/// gradient of the potential.
pub fn l2p(order: usize, local: &[Complex64], y: [f64; 3], scratch: &mut [Complex64]) -> (f64, [f64; 3]) {
    regular(order, y, scratch);
    let mut phi = 0.0;
    for (l, r) in local.iter().zip(scratch.iter()).take(len(order)) {
        phi += (l * r.conj()).re;
    }
    // gradient from the order-one coefficients of the expansion re-centred at y
    let mut g10 = Complex64::new(0.0, 0.0);
    let mut g11 = Complex64::new(0.0, 0.0);
    for l in 1..=order {
        for m in -(l as isize)..=(l as isize) {
            let c = local[idx(l, m)];
            if m.unsigned_abs() < l {
                g10 += c * scratch[idx(l - 1, m)].conj();
            }
            let m1 = m - 1;
            if m1.unsigned_abs() < l {
                g11 += c * scratch[idx(l - 1, m1)].conj();
            }
        }
    }
    (phi, [-g11.re, -g11.im, g10.re])
}

/// Real contraction `Σ M_l^m L_l^m`.
pub fn contract(order: usize, multipole: &[Complex64], local: &[Complex64]) -> f64 {
    let mut acc = 0.0;
    for (m, l) in multipole.iter().zip(local).take(len(order)) {
        acc += (m * l).re;
    }
    acc
}

/// Dipole moment vector `Σ q (r - c)` from the order-one multipole coefficients.
pub fn dipole_from_multipole(multipole: &[Complex64]) -> [f64; 3] {
    let m10 = multipole[idx(1, 0)];
    let m11 = multipole[idx(1, 1)];
    // M_1^1 = -(μx - iμy)/2
    [-2.0 * m11.re, 2.0 * m11.im, m10.re]
}

/// Order-one local coefficients of the linear potential `φ(y) = g·y`.
pub fn linear_local(g: [f64; 3], local: &mut [Complex64]) {
    local[idx(1, 0)] = Complex64::new(g[2], 0.0);
    let l11 = Complex64::new(-g[0], -g[1]);
    local[idx(1, 1)] = l11;
    local[idx(1, -1)] = -l11.conj();
}

#[inline(always)]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
