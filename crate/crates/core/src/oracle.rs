//! Brute-force reference implementations. Nothing here calls the FMM kernels
//! or the λ-weight code, so they can referee both.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::sum::Neumaier;
use crate::system::TitratableSite;

/// Largest number of end-state assignments enumerated.
pub const MAX_ASSIGNMENTS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{0} assignments exceed the limit of {MAX_ASSIGNMENTS}")]
    TooManyAssignments(usize),
    #[error("no end state for assignment {0:?}")]
    MissingEndState(Vec<usize>),
    #[error("k factor needs a site with two forms, got {0}")]
    NotTwoForms(usize),
    #[error("site {site}: {got} λ values for {forms} forms")]
    LambdaCount { site: usize, forms: usize, got: usize },
}

/// `½ Σ_n Σ' q_i q_j / |r_i - r_j + nL|` over shifts with `|n|∞ <= shell_cap`.
/// `None` sums the bare cell without images.
pub fn direct_energy(positions: &[[f64; 3]], charges: &[f64], box_length: f64, shell_cap: Option<usize>) -> f64 {
    let s = shell_cap.map_or(0, |c| c as i64);
    let shifts: Vec<[f64; 3]> = (-s..=s)
        .flat_map(|x| (-s..=s).flat_map(move |y| (-s..=s).map(move |z| [x, y, z])))
        .map(|n| n.map(|v| v as f64 * box_length))
        .collect();
    let rows: Vec<f64> = (0..positions.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = Neumaier::new();
            for sh in &shifts {
                let zero = sh.iter().all(|&v| v == 0.0);
                for j in 0..positions.len() {
                    if zero && i == j {
                        continue;
                    }
                    let d = [
                        positions[i][0] - positions[j][0] + sh[0],
                        positions[i][1] - positions[j][1] + sh[1],
                        positions[i][2] - positions[j][2] + sh[2],
                    ];
                    acc.add(charges[j] / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
                }
            }
            charges[i] * acc.value()
        })
        .collect();
    0.5 * rows.into_iter().collect::<Neumaier>().value()
}

/// End-state energies keyed by one form index per site.
#[derive(Clone, Debug, PartialEq)]
pub struct EndStateEnergySet {
    pub forms_per_site: Vec<usize>,
    pub energies: BTreeMap<Vec<usize>, f64>,
}

impl EndStateEnergySet {
    pub fn get(&self, assignment: &[usize]) -> Result<f64, OracleError> {
        self.energies.get(assignment).copied().ok_or_else(|| OracleError::MissingEndState(assignment.to_vec()))
    }
}

/// Every assignment, site 0 varying fastest.
pub fn assignments(forms_per_site: &[usize]) -> Result<Vec<Vec<usize>>, OracleError> {
    let total = forms_per_site.iter().try_fold(1usize, |acc, &f| acc.checked_mul(f)).unwrap_or(usize::MAX);
    if total > MAX_ASSIGNMENTS {
        return Err(OracleError::TooManyAssignments(total));
    }
    Ok((0..total)
        .map(|mut code| {
            forms_per_site
                .iter()
                .map(|&f| {
                    let r = code % f;
                    code /= f;
                    r
                })
                .collect()
        })
        .collect())
}

/// Charges of `base` with every site set to the form in `assignment`.
pub fn pure_charges(base: &[f64], sites: &[TitratableSite], assignment: &[usize]) -> Vec<f64> {
    let mut q = base.to_vec();
    for (site, &rho) in sites.iter().zip(assignment) {
        for (a, &i) in site.indices.iter().enumerate() {
            q[i] = site.forms[rho][a];
        }
    }
    q
}

/// Evaluates `energy` on the pure charges of every assignment.
pub fn end_state_hamiltonians<F>(base: &[f64], sites: &[TitratableSite], energy: F) -> Result<EndStateEnergySet, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    let forms_per_site: Vec<usize> = sites.iter().map(|s| s.forms.len()).collect();
    let mut energies = BTreeMap::new();
    for a in assignments(&forms_per_site)? {
        let q = pure_charges(base, sites, &a);
        energies.insert(a, energy(&q));
    }
    Ok(EndStateEnergySet { forms_per_site, energies })
}

/// Factor of λ_k in the weight of form `rho`, and its derivative.
fn branch_factor(lambda: f64, rho: usize, k: usize) -> (f64, f64) {
    if (rho >> k) & 1 == 1 {
        (lambda, 1.0)
    } else {
        (1.0 - lambda, -1.0)
    }
}

fn check_lambdas(set: &EndStateEnergySet, lambdas: &[Vec<f64>]) -> Result<(), OracleError> {
    for (s, (&f, l)) in set.forms_per_site.iter().zip(lambdas).enumerate() {
        if 1usize << l.len() != f {
            return Err(OracleError::LambdaCount { site: s, forms: f, got: l.len() });
        }
    }
    Ok(())
}

/// Multilinear blend `Σ_X Π factors H_X`.
pub fn blended_energy(set: &EndStateEnergySet, lambdas: &[Vec<f64>]) -> Result<f64, OracleError> {
    check_lambdas(set, lambdas)?;
    let mut acc = Neumaier::new();
    for (a, &h) in &set.energies {
        let mut w = 1.0;
        for (s, &rho) in a.iter().enumerate() {
            for (k, &l) in lambdas[s].iter().enumerate() {
                w *= branch_factor(l, rho, k).0;
            }
        }
        acc.add(w * h);
    }
    Ok(acc.value())
}

/// `-∂H/∂λ` of the multilinear blend, per site and λ.
pub fn reference_lambda_forces(set: &EndStateEnergySet, lambdas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, OracleError> {
    check_lambdas(set, lambdas)?;
    for a in assignments(&set.forms_per_site)? {
        set.get(&a)?;
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for (sigma, ls) in lambdas.iter().enumerate() {
        let mut forces = Vec::with_capacity(ls.len());
        for kk in 0..ls.len() {
            let mut acc = Neumaier::new();
            for (a, &h) in &set.energies {
                let mut w = 1.0;
                for (s, &rho) in a.iter().enumerate() {
                    for (k, &l) in lambdas[s].iter().enumerate() {
                        let (f, df) = branch_factor(l, rho, k);
                        w *= if s == sigma && k == kk { df } else { f };
                    }
                }
                acc.add(w * h);
            }
            forces.push(-acc.value());
        }
        out.push(forces);
    }
    Ok(out)
}

/// Two-form reference force `H_0 - H_1`.
pub fn two_form_force(h0: f64, h1: f64) -> f64 {
    h0 - h1
}

/// Four-form reference forces `(F_λ0, F_λ1)` with `h[ρ]`, `ρ = b_0 + 2 b_1`.
pub fn four_form_forces(h: [f64; 4], lambda0: f64, lambda1: f64) -> (f64, f64) {
    let f0 = (1.0 - lambda1) * (h[0] - h[1]) + lambda1 * (h[2] - h[3]);
    let f1 = (1.0 - lambda0) * (h[0] - h[2]) + lambda0 * (h[1] - h[3]);
    (f0, f1)
}

/// Charges blended from `lambdas` with weights computed here.
pub fn blended_charges(base: &[f64], sites: &[TitratableSite], lambdas: &[Vec<f64>]) -> Vec<f64> {
    let mut q = base.to_vec();
    for (site, ls) in sites.iter().zip(lambdas) {
        for (a, &i) in site.indices.iter().enumerate() {
            q[i] = (0..site.forms.len())
                .map(|rho| ls.iter().enumerate().map(|(k, &l)| branch_factor(l, rho, k).0).product::<f64>() * site.forms[rho][a])
                .sum();
        }
    }
    q
}

/// `-∂H̃/∂λ` by central differences of `energy` on blended charges.
pub fn qi_force_fd<F>(base: &[f64], sites: &[TitratableSite], lambdas: &[Vec<f64>], h: f64, energy: F) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(sites.len());
    for (s, ls) in lambdas.iter().enumerate() {
        let mut forces = Vec::with_capacity(ls.len());
        for k in 0..ls.len() {
            let mut plus = lambdas.to_vec();
            let mut minus = lambdas.to_vec();
            plus[s][k] += h;
            minus[s][k] -= h;
            let ep = energy(&blended_charges(base, sites, &plus));
            let em = energy(&blended_charges(base, sites, &minus));
            forces.push(-(ep - em) / (2.0 * h));
        }
        out.push(forces);
    }
    out
}

/// `-∂H̃/∂λ = -Σ_i Ṽ_i ∂q̃_i/∂λ_k`, where `potentials` already exclude each
/// particle's own bare term but keep its periodic images.
pub fn qi_force_chain(potentials: &[f64], sites: &[TitratableSite], lambdas: &[Vec<f64>]) -> Vec<Vec<f64>> {
    sites
        .iter()
        .zip(lambdas)
        .map(|(site, ls)| {
            (0..ls.len())
                .map(|kk| {
                    let mut acc = Neumaier::new();
                    for rho in 0..site.forms.len() {
                        let dw: f64 = ls
                            .iter()
                            .enumerate()
                            .map(|(k, &l)| {
                                let (f, df) = branch_factor(l, rho, k);
                                if k == kk {
                                    df
                                } else {
                                    f
                                }
                            })
                            .product();
                        for (a, &i) in site.indices.iter().enumerate() {
                            acc.add(dw * site.forms[rho][a] * potentials[i]);
                        }
                    }
                    -acc.value()
                })
                .collect()
        })
        .collect()
}

/// `k = Σ_{i≠j} Δq_i Δq_j / r_ij` over ordered intra-site pairs, with
/// `Δq = q^(0) - q^(1)`. Distances use the minimum image when `box_length`
/// is given.
pub fn k_factor(site: &TitratableSite, positions: &[[f64; 3]], box_length: Option<f64>) -> Result<f64, OracleError> {
    if site.forms.len() != 2 {
        return Err(OracleError::NotTwoForms(site.forms.len()));
    }
    let dq: Vec<f64> = site.forms[0].iter().zip(&site.forms[1]).map(|(a, b)| a - b).collect();
    let mut acc = Neumaier::new();
    for (a, &i) in site.indices.iter().enumerate() {
        for (b, &j) in site.indices.iter().enumerate() {
            if a == b {
                continue;
            }
            let mut r2 = 0.0;
            for k in 0..3 {
                let mut d = positions[i][k] - positions[j][k];
                if let Some(l) = box_length {
                    d -= l * (d / l).round();
                }
                r2 += d * d;
            }
            acc.add(dq[a] * dq[b] / r2.sqrt());
        }
    }
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn site2() -> TitratableSite {
        TitratableSite { indices: vec![0, 1], forms: vec![vec![0.4, -0.4], vec![0.0, 0.0]] }
    }

    #[test]
    fn single_pair() {
        let pos = [[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]];
        assert_eq!(direct_energy(&pos, &[1.0, -1.0], 10.0, Some(0)), -2.0);
        assert_eq!(direct_energy(&pos, &[1.0, -1.0], 10.0, None), -2.0);
    }

    #[test]
    fn shell_sum_converges_for_neutral_crystal() {
        // rock-salt conventional cell: zero dipole, cubic symmetry
        let mut pos = Vec::new();
        let mut q = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    pos.push([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
                    q.push(if (x + y + z) % 2 == 0 { 1.0 } else { -1.0 });
                }
            }
        }
        let e: Vec<f64> = (1..=6).map(|s| direct_energy(&pos, &q, 2.0, Some(s))).collect();
        let diffs: Vec<f64> = e.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        for w in diffs.windows(2) {
            assert!(w[1] < w[0], "{diffs:?}");
        }
        // Madelung constant per ion pair
        assert_relative_eq!(-e[5] / 4.0, 1.747_565, max_relative = 1e-3);
    }

    #[test]
    fn enumeration_order() {
        assert_eq!(assignments(&[2]).unwrap(), vec![vec![0], vec![1]]);
        assert_eq!(assignments(&[2, 2]).unwrap(), vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
        assert_eq!(assignments(&[16, 16, 2]), Err(OracleError::TooManyAssignments(512)));
    }

    #[test]
    fn two_form_arithmetic() {
        let set = EndStateEnergySet {
            forms_per_site: vec![2],
            energies: [(vec![0], -3.0), (vec![1], -2.5)].into_iter().collect(),
        };
        for l in [0.1, 0.345, 0.9] {
            assert_eq!(reference_lambda_forces(&set, &[vec![l]]).unwrap(), vec![vec![-0.5]]);
        }
        assert_eq!(two_form_force(-3.0, -2.5), -0.5);
    }

    #[test]
    fn four_form_blend_matches_finite_difference() {
        let h = [-1.3, 0.7, 2.2, -0.4];
        let set = EndStateEnergySet {
            forms_per_site: vec![4],
            energies: (0..4).map(|r| (vec![r], h[r])).collect(),
        };
        let (l0, l1) = (0.345, 0.721);
        let f = reference_lambda_forces(&set, &[vec![l0, l1]]).unwrap();
        let (a, b) = four_form_forces(h, l0, l1);
        assert_relative_eq!(f[0][0], a, max_relative = 1e-14);
        assert_relative_eq!(f[0][1], b, max_relative = 1e-14);
        let eps = 1e-6;
        let e = |x: f64, y: f64| blended_energy(&set, &[vec![x, y]]).unwrap();
        let fd0 = -(e(l0 + eps, l1) - e(l0 - eps, l1)) / (2.0 * eps);
        let fd1 = -(e(l0, l1 + eps) - e(l0, l1 - eps)) / (2.0 * eps);
        assert!((fd0 - a).abs() < 1e-9 && (fd1 - b).abs() < 1e-9);
    }

    #[test]
    fn reference_force_is_flat_in_own_lambda() {
        let h = [0.3, -1.1, 0.5, 2.0];
        let set = EndStateEnergySet { forms_per_site: vec![4], energies: (0..4).map(|r| (vec![r], h[r])).collect() };
        let f: Vec<f64> = [0.1, 0.5, 0.8].iter().map(|&l| reference_lambda_forces(&set, &[vec![l, 0.3]]).unwrap()[0][0]).collect();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
    }

    #[test]
    fn missing_end_state_is_an_error() {
        let set = EndStateEnergySet { forms_per_site: vec![2], energies: [(vec![0], 1.0)].into_iter().collect() };
        assert_eq!(reference_lambda_forces(&set, &[vec![0.5]]), Err(OracleError::MissingEndState(vec![1])));
    }

    #[test]
    fn k_factor_examples() {
        let pos = [[1.0, 1.0, 1.0], [1.15, 1.0, 1.0]];
        assert_relative_eq!(k_factor(&site2(), &pos, None).unwrap(), -2.0 * 0.16 / 0.15, max_relative = 1e-14);
        let one = TitratableSite { indices: vec![0, 1], forms: vec![vec![0.4, 0.1], vec![0.0, 0.1]] };
        assert_eq!(k_factor(&one, &pos, None).unwrap(), 0.0);
        let wrapped = [[0.05, 1.0, 1.0], [2.9, 1.0, 1.0]];
        assert_relative_eq!(k_factor(&site2(), &wrapped, Some(3.0)).unwrap(), -2.0 * 0.16 / 0.15, max_relative = 1e-12);
        let four = TitratableSite { indices: vec![0], forms: vec![vec![0.0]; 4] };
        assert_eq!(k_factor(&four, &pos, None), Err(OracleError::NotTwoForms(4)));
    }

    #[test]
    fn qi_chain_rule_matches_finite_difference() {
        let pos = vec![[0.3, 0.4, 0.5], [0.45, 0.5, 0.55], [1.6, 1.2, 0.9], [0.9, 1.7, 1.1]];
        let sites = vec![TitratableSite { indices: vec![0, 1], forms: vec![vec![0.5, -0.2], vec![-0.1, 0.3]] }];
        let base = vec![0.0, 0.0, 0.7, -0.45];
        let lam = vec![vec![0.3]];
        let l = 2.0;
        let energy = |q: &[f64]| direct_energy(&pos, q, l, Some(1));
        let fd = qi_force_fd(&base, &sites, &lam, 1e-6, energy);
        let q = blended_charges(&base, &sites, &lam);
        let pot: Vec<f64> = (0..4)
            .map(|i| {
                // potential at i: energy derivative with respect to q_i
                let e = |d: f64| {
                    let mut qq = q.clone();
                    qq[i] += d;
                    energy(&qq)
                };
                (e(1e-4) - e(-1e-4)) / 2e-4
            })
            .collect();
        let chain = qi_force_chain(&pot, &sites, &lam);
        assert!((fd[0][0] - chain[0][0]).abs() < 1e-8, "{fd:?} {chain:?}");
    }

    #[test]
    fn identical_forms_give_no_qi_force() {
        let pos = vec![[0.3, 0.4, 0.5], [0.45, 0.5, 0.55], [1.6, 1.2, 0.9]];
        let sites = vec![TitratableSite { indices: vec![0, 1], forms: vec![vec![0.5, -0.2], vec![0.5, -0.2]] }];
        let base = vec![0.0, 0.0, 0.7];
        let f = qi_force_fd(&base, &sites, &[vec![0.6]], 1e-6, |q| direct_energy(&pos, q, 2.0, Some(1)));
        assert_eq!(f[0][0], 0.0);
    }
}
