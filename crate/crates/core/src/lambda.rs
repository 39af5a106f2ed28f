//! Multilinear map from per-site λ values to per-form weights λ̃.
//!
//! Form `ρ = Σ_k b_k 2^k` takes the factor `λ_k` when bit `b_k` is set and
//! `1 - λ_k` otherwise, so `λ_0` is the least significant bit. Branch index
//! `2k + b` names the factor chosen for `λ_k`: even branches are `1 - λ_k`,
//! odd branches are `λ_k`.

use thiserror::Error;

pub const MAX_LAMBDAS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum LambdaError {
    #[error("sites support 1..={MAX_LAMBDAS} λ values, got {0}")]
    UnsupportedCount(usize),
    #[error("λ index {k} out of range for {count} values")]
    IndexOutOfRange { k: usize, count: usize },
}

fn check(count: usize) -> Result<(), LambdaError> {
    if (1..=MAX_LAMBDAS).contains(&count) {
        Ok(())
    } else {
        Err(LambdaError::UnsupportedCount(count))
    }
}

#[inline]
fn factor(lambda: f64, bit: bool) -> f64 {
    if bit {
        lambda
    } else {
        1.0 - lambda
    }
}

/// λ̃ for every form of a site with `lambda.len()` values.
pub fn expand_weights(lambda: &[f64]) -> Result<Vec<f64>, LambdaError> {
    check(lambda.len())?;
    let forms = 1usize << lambda.len();
    Ok((0..forms)
        .map(|rho| lambda.iter().enumerate().map(|(k, &l)| factor(l, rho >> k & 1 == 1)).product())
        .collect())
}

/// `∂λ̃_ρ/∂λ_k` for every form.
pub fn weight_gradient(lambda: &[f64], k: usize) -> Result<Vec<f64>, LambdaError> {
    check(lambda.len())?;
    if k >= lambda.len() {
        return Err(LambdaError::IndexOutOfRange { k, count: lambda.len() });
    }
    let forms = 1usize << lambda.len();
    Ok((0..forms)
        .map(|rho| {
            let rest: f64 = lambda
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(i, &l)| factor(l, rho >> i & 1 == 1))
                .product();
            if rho >> k & 1 == 1 {
                rest
            } else {
                -rest
            }
        })
        .collect())
}

/// Pair list and per-form branch tuples for a site with `count` λ values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    /// `(2k, 2k+1)` for each λ_k.
    pub pairs: Vec<(usize, usize)>,
    /// For each form, the branch chosen for every λ, in λ order.
    pub tuples: Vec<Vec<usize>>,
}

pub fn branch_index_map(count: usize) -> Result<IndexMap, LambdaError> {
    check(count)?;
    let pairs = (0..count).map(|k| (2 * k, 2 * k + 1)).collect();
    let tuples = (0..1usize << count)
        .map(|rho| (0..count).map(|k| 2 * k + (rho >> k & 1)).collect())
        .collect();
    Ok(IndexMap { pairs, tuples })
}

impl IndexMap {
    pub fn num_lambdas(&self) -> usize {
        self.pairs.len()
    }

    /// Forms whose weight contains branch `b`, ascending.
    pub fn forms_using(&self, branch: usize) -> Vec<usize> {
        self.tuples.iter().enumerate().filter(|(_, t)| t.contains(&branch)).map(|(rho, _)| rho).collect()
    }

    /// Product of the weight factors of form `rho` except the one for `λ_k`.
    pub fn exclusion_product(&self, lambda: &[f64], rho: usize, k: usize) -> f64 {
        self.tuples[rho]
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(i, &b)| factor(lambda[i], b % 2 == 1))
            .product()
    }
}

/// Maps a branch index written with `λ_0` as the most significant bit to the
/// least-significant-bit convention used here.
pub fn branch_from_msb(count: usize, branch: usize) -> usize {
    let k = branch / 2;
    2 * (count - 1 - k) + branch % 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_lambda() {
        let w = expand_weights(&[0.345]).unwrap();
        assert_abs_diff_eq!(w[0], 0.655, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.345, epsilon = 1e-15);
        assert_eq!(weight_gradient(&[0.9], 0).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn two_lambdas() {
        let w = expand_weights(&[0.345, 0.721]).unwrap();
        let expect = [0.182745, 0.096255, 0.472255, 0.248745];
        for (a, b) in w.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let g = weight_gradient(&[0.345, 0.721], 0).unwrap();
        for (a, b) in g.iter().zip([-0.279, 0.279, -0.721, 0.721]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn origin_selects_form_zero() {
        for l in 1..=4 {
            let w = expand_weights(&vec![0.0; l]).unwrap();
            assert_eq!(w[0], 1.0);
            assert!(w[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_counts() {
        assert_eq!(expand_weights(&[]), Err(LambdaError::UnsupportedCount(0)));
        assert!(expand_weights(&[0.5; 5]).is_err());
        assert_eq!(weight_gradient(&[0.5, 0.5], 2), Err(LambdaError::IndexOutOfRange { k: 2, count: 2 }));
    }

    #[test]
    fn msb_table_sets() {
        let map = branch_index_map(3).unwrap();
        assert_eq!(map.forms_using(branch_from_msb(3, 5)), vec![1, 3, 5, 7]);
        assert_eq!(map.forms_using(branch_from_msb(3, 2)), vec![0, 1, 4, 5]);
        assert_eq!(map.forms_using(branch_from_msb(3, 0)), vec![0, 1, 2, 3]);
        assert_eq!(map.forms_using(branch_from_msb(3, 1)), vec![4, 5, 6, 7]);
        assert_eq!(map.forms_using(branch_from_msb(3, 3)), vec![2, 3, 6, 7]);
        assert_eq!(map.forms_using(branch_from_msb(3, 4)), vec![0, 2, 4, 6]);
        let one = branch_index_map(1).unwrap();
        assert_eq!(one.forms_using(0), vec![0]);
        assert_eq!(one.forms_using(1), vec![1]);
        assert_eq!(one.pairs, vec![(0, 1)]);
    }

    #[test]
    fn tuples_pick_one_per_pair() {
        for l in 1..=4 {
            let map = branch_index_map(l).unwrap();
            for t in &map.tuples {
                for (k, &b) in t.iter().enumerate() {
                    assert!(b == map.pairs[k].0 || b == map.pairs[k].1);
                }
            }
        }
    }

    #[test]
    fn exclusion_product_is_gradient_magnitude() {
        let lam = [0.3, 0.8, 0.15];
        let map = branch_index_map(3).unwrap();
        for k in 0..3 {
            let g = weight_gradient(&lam, k).unwrap();
            for rho in 0..8 {
                assert_abs_diff_eq!(g[rho].abs(), map.exclusion_product(&lam, rho, k), epsilon = 1e-16);
            }
        }
    }
}
