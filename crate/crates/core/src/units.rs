//! Physical constants in kJ/mol, nm, ps, e.

/// Coulomb prefactor 1/(4πε0), kJ mol^-1 nm e^-2.
pub const COULOMB: f64 = 138.935_458;

/// Molar gas constant, kJ mol^-1 K^-1.
pub const GAS_CONSTANT: f64 = 0.008_314_462_618;

/// Thermal energy k_B T in kJ/mol.
pub fn kt(temperature_k: f64) -> f64 {
    GAS_CONSTANT * temperature_k
}
