//! Surface (dipole) term that turns the cubic-shell lattice sum into
//! conducting-boundary energies.
//!
//! For a cell dipole `μ = Σ q (r - c)`, the shell-ordered sum exceeds the
//! conducting-boundary value by `(2π/3V)|μ|²`, so the correction energy is
//! `-(2π/3V)|μ|²`. As a pair operator this is
//! `A_ij = -(4π/3V) (r_i - c)·(r_j - c)`.
//!
//! A second route builds eight fictitious corner charges carrying dipole
//! `-μ` and zero net charge, takes their multipole, and contracts the cell
//! multipole with the surface local of the corner set. Both routes must agree.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::harmonics::{contract, dipole_from_multipole, len, linear_local, p2m};

/// `4π/3V` for a cubic cell.
pub fn surface_coefficient(box_length: f64) -> f64 {
    4.0 * PI / (3.0 * box_length.powi(3))
}

/// Correction energy `-(2π/3V)|μ|²`.
pub fn dipole_energy(mu: [f64; 3], box_length: f64) -> f64 {
    -0.5 * surface_coefficient(box_length) * dot(mu, mu)
}

/// Bilinear form `-(4π/3V) μ_a·μ_b`.
pub fn dipole_coupling(mu_a: [f64; 3], mu_b: [f64; 3], box_length: f64) -> f64 {
    -surface_coefficient(box_length) * dot(mu_a, mu_b)
}

/// Dipole moment of point charges about `center`.
pub fn dipole_moment(center: [f64; 3], positions: &[[f64; 3]], charges: &[f64]) -> [f64; 3] {
    let mut acc = [crate::sum::Neumaier::new(); 3];
    for (p, &q) in positions.iter().zip(charges) {
        for k in 0..3 {
            acc[k].add(q * (p[k] - center[k]));
        }
    }
    [acc[0].value(), acc[1].value(), acc[2].value()]
}

/// Eight corner charges (positions relative to the cell centre) whose dipole
/// is `-mu` and whose total charge is zero.
pub fn corner_charges(mu: [f64; 3], box_length: f64) -> ([[f64; 3]; 8], [f64; 8]) {
    let h = box_length / 2.0;
    let mut pos = [[0.0; 3]; 8];
    let mut q = [0.0; 8];
    for c in 0..8 {
        let p = [
            if c & 1 == 0 { -h } else { h },
            if c & 2 == 0 { -h } else { h },
            if c & 4 == 0 { -h } else { h },
        ];
        pos[c] = p;
        q[c] = -dot(mu, p) / (2.0 * box_length * box_length);
    }
    (pos, q)
}

/// Surface local of a multipole: the linear potential `-(4π/3V) μ(ω)·y`.
pub fn surface_local(order: usize, multipole: &[Complex64], box_length: f64) -> Vec<Complex64> {
    let mu = dipole_from_multipole(multipole);
    let k = surface_coefficient(box_length);
    let mut out = vec![Complex64::new(0.0, 0.0); len(order.max(1))];
    linear_local([-k * mu[0], -k * mu[1], -k * mu[2]], &mut out);
    out
}

/// Correction energy through the corner-charge construction:
/// `-½ ω(q)·S(ω(q_c))` with `q_c` the corner set of the cell dipole.
pub fn dipole_energy_via_corners(cell_multipole: &[Complex64], box_length: f64) -> f64 {
    let order = 1;
    let mu = dipole_from_multipole(cell_multipole);
    let (pos, q) = corner_charges(mu, box_length);
    let mut corner = vec![Complex64::new(0.0, 0.0); len(order)];
    p2m(order, [0.0; 3], &pos, &q, &mut corner);
    let local = surface_local(order, &corner, box_length);
    -0.5 * contract(order, &cell_multipole[..len(order)], &local)
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
