//! Agreement between estimated and true projections, partitions and
//! coefficients.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm;

/// `|⟨ĝ/‖ĝ‖, π/‖π‖⟩|`.
pub fn projection_similarity(g_hat: &DVector<f64>, pi_true: &DVector<f64>) -> Result<f64> {
    if g_hat.len() != pi_true.len() {
        return Err(Error::LengthMismatch(g_hat.len(), pi_true.len()));
    }
    let (a, b) = (g_hat.norm(), pi_true.norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((g_hat.dot(pi_true) / (a * b)).abs().min(1.0))
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Maps arbitrary labels to `0..m` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ca, ma) = compact(a);
    let (cb, mb) = compact(b);
    let mut table = vec![vec![0.0; mb]; ma];
    for (&i, &j) in ca.iter().zip(&cb) {
        table[i][j] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..mb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Pair counts: together in both, together in `a`, together in `b`.
fn pair_counts(a: &[usize], b: &[usize]) -> (f64, f64, f64) {
    let (table, rows, cols) = contingency(a, b);
    let both = table.iter().flatten().map(|&v| pairs(v)).sum();
    let in_a = rows.iter().map(|&v| pairs(v)).sum();
    let in_b = cols.iter().map(|&v| pairs(v)).sum();
    (both, in_a, in_b)
}

/// Hubert–Arabie adjusted Rand index. Returns 1 when both partitions are
/// trivial in the same way (the index is otherwise undefined).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let n = a.len() as f64;
    if a.len() < 2 {
        return Err(Error::InvalidConfig("ARI needs at least two items".into()));
    }
    let (both, in_a, in_b) = pair_counts(a, b);
    let expected = in_a * in_b / pairs(n);
    let max = 0.5 * (in_a + in_b);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((both - expected) / (max - expected))
}

/// Pairs co-clustered in both partitions over pairs co-clustered in at
/// least one. Two all-singleton partitions give 1.
pub fn jaccard_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let (both, in_a, in_b) = pair_counts(a, b);
    let union = in_a + in_b - both;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(both / union)
}

/// Smallest mismatch fraction over relabelings of `a`.
pub fn classification_error(a: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(a, truth)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let (ca, ma) = compact(a);
    let (ct, mt) = compact(truth);
    let m = ma.max(mt);
    if m > perm::MAX_EXHAUSTIVE {
        return Err(Error::PermutationLimit(m));
    }
    let mut table = vec![vec![0usize; m]; m];
    for (&i, &j) in ca.iter().zip(&ct) {
        table[i][j] += 1;
    }
    let mut best = 0usize;
    for p in perm::permutations(m)? {
        let hits: usize = (0..m).map(|i| table[i][p[i]]).sum();
        best = best.max(hits);
    }
    Ok(1.0 - best as f64 / a.len() as f64)
}

/// Permutation aligning estimated clusters to true ones by `β` distance:
/// estimated cluster `order[k]` is matched to true cluster `k`.
pub fn align_to_truth(beta_hat: &[DVector<f64>], beta_true: &[DVector<f64>]) -> Result<Vec<usize>> {
    if beta_hat.len() != beta_true.len() {
        return Err(Error::LengthMismatch(beta_hat.len(), beta_true.len()));
    }
    perm::best_assignment(beta_true.len(), |k, m| (&beta_hat[m] - &beta_true[k]).norm_squared())
}

/// Variance coefficients re-expressed for the unit-norm projection
/// `γ/‖γ‖`: only the intercept changes, by `−2 log ‖γ‖`.
pub fn unit_scale_beta(gamma: &DVector<f64>, beta: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let norm = gamma.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroVector);
    }
    let shift = -2.0 * norm.ln();
    Ok(beta
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b[0] += shift;
            b
        })
        .collect())
}

/// Bias and MSE of one true cluster's coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientError {
    /// One-based true cluster.
    pub cluster: usize,
    /// Entrywise mean of `β̂ − β`.
    pub bias: Vec<f64>,
    /// Entrywise mean of `(β̂ − β)²`.
    pub mse: Vec<f64>,
    /// Averages of `bias` and `mse` over the coefficients.
    pub mean_bias: f64,
    pub mean_mse: f64,
    pub replicates: usize,
}

/// Bias and MSE across replicates after aligning each replicate's clusters
/// to the truth. Replicates with the wrong number of clusters or entries
/// are rejected.
pub fn coefficient_bias_mse(estimates: &[Vec<DVector<f64>>], truth: &[DVector<f64>]) -> Result<Vec<CoefficientError>> {
    let k = truth.len();
    let q = truth.first().map_or(0, |b| b.len());
    let mut sum = vec![DVector::<f64>::zeros(q); k];
    let mut sq = vec![DVector::<f64>::zeros(q); k];
    for est in estimates {
        if est.len() != k || est.iter().any(|b| b.len() != q) {
            return Err(Error::DimensionMismatch("estimate shape differs from truth".into()));
        }
        let order = align_to_truth(est, truth)?;
        for c in 0..k {
            let diff = &est[order[c]] - &truth[c];
            sum[c] += &diff;
            sq[c] += diff.component_mul(&diff);
        }
    }
    let r = estimates.len() as f64;
    Ok((0..k)
        .map(|c| {
            let bias: Vec<f64> = sum[c].iter().map(|v| v / r).collect();
            let mse: Vec<f64> = sq[c].iter().map(|v| v / r).collect();
            CoefficientError {
                cluster: c + 1,
                mean_bias: bias.iter().sum::<f64>() / q as f64,
                mean_mse: mse.iter().sum::<f64>() / q as f64,
                bias,
                mse,
                replicates: estimates.len(),
            }
        })
        .collect())
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Clustering agreement of one method with the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub jaccard: f64,
    pub ari: f64,
    pub error: f64,
}

pub fn score_clustering(labels: &[usize], truth: &[usize]) -> Result<ClusterScores> {
    Ok(ClusterScores {
        jaccard: jaccard_index(labels, truth)?,
        ari: adjusted_rand_index(labels, truth)?,
        error: classification_error(labels, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pair counting over all `C(n, 2)` pairs.
    fn brute(a: &[usize], b: &[usize]) -> (f64, f64) {
        let n = a.len();
        let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => ss += 1.0,
                    (true, false) => sd += 1.0,
                    (false, true) => ds += 1.0,
                    (false, false) => dd += 1.0,
                }
            }
        }
        let total: f64 = ss + sd + ds + dd;
        let expected = (ss + sd) * (ss + ds) / total;
        let max = 0.5 * ((ss + sd) + (ss + ds));
        let ari = (ss - expected) / (max - expected);
        let jac = ss / (ss + sd + ds);
        (ari, jac)
    }

    #[test]
    fn similarity_examples() {
        let a = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        assert!((projection_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((projection_similarity(&(-&a * 3.0), &a).unwrap() - 1.0).abs() < 1e-15);
        let o = DVector::from_vec(vec![2.0, -1.0, 0.0]);
        assert!(projection_similarity(&a, &o).unwrap().abs() < 1e-15);
        assert!(matches!(projection_similarity(&DVector::zeros(3), &a), Err(Error::ZeroVector)));
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[1, 1, 2, 2], &[2, 2, 1, 1]).unwrap(), 1.0);
        let a = [1, 1, 1, 2, 2, 2];
        let b = [1, 1, 2, 2, 2, 2];
        let (ari, _) = brute(&a, &b);
        assert!((adjusted_rand_index(&a, &b).unwrap() - ari).abs() < 1e-12);
        assert!(matches!(adjusted_rand_index(&[1, 2], &[1]), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn jaccard_examples() {
        // Together in both: {0,1}; together in either: {0,1}, {2,3}, {0,2}, {1,2}.
        assert_eq!(jaccard_index(&[1, 1, 2, 2], &[1, 1, 1, 2]).unwrap(), 0.25);
        assert_eq!(brute(&[1, 1, 2, 2], &[1, 1, 1, 2]).1, 0.25);
        assert_eq!(jaccard_index(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(jaccard_index(&[0, 1, 2], &[5, 6, 7]).unwrap(), 1.0);
    }

    #[test]
    fn error_examples() {
        assert_eq!(classification_error(&[0, 1, 1], &[0, 1, 1]).unwrap(), 0.0);
        assert_eq!(classification_error(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        let mut a = vec![0; 5];
        a.extend(vec![1; 5]);
        let mut t = a.clone();
        t[0] = 1;
        assert!((classification_error(&a, &t).unwrap() - 0.1).abs() < 1e-15);
        let many: Vec<usize> = (0..9).collect();
        assert!(matches!(classification_error(&many, &many), Err(Error::PermutationLimit(9))));
    }

    #[test]
    fn exhaustive_small_partitions_match_pair_counting() {
        // Every pair of labelings of n = 5 items into at most 3 labels.
        let n = 5;
        let all: Vec<Vec<usize>> = (0..3usize.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .map(|_| {
                        let l = c % 3;
                        c /= 3;
                        l
                    })
                    .collect()
            })
            .collect();
        for a in all.iter().step_by(7) {
            for b in all.iter().step_by(11) {
                let (ari, jac) = brute(a, b);
                if ari.is_finite() {
                    assert!((adjusted_rand_index(a, b).unwrap() - ari).abs() < 1e-12);
                }
                if jac.is_finite() {
                    assert!((jaccard_index(a, b).unwrap() - jac).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bias_mse_of_constant_shift() {
        let truth = vec![DVector::from_vec(vec![1.0, -1.0]), DVector::from_vec(vec![-1.0, 1.0])];
        let shifted: Vec<DVector<f64>> = truth.iter().map(|b| b.add_scalar(0.1)).collect();
        // Second replicate has its clusters swapped.
        let reps = vec![shifted.clone(), vec![shifted[1].clone(), shifted[0].clone()]];
        let rows = coefficient_bias_mse(&reps, &truth).unwrap();
        for r in rows {
            assert!((r.mean_bias - 0.1).abs() < 1e-12);
            assert!((r.mean_mse - 0.01).abs() < 1e-12);
        }
        let exact = coefficient_bias_mse(std::slice::from_ref(&truth), &truth).unwrap();
        assert!(exact.iter().all(|r| r.mean_bias == 0.0 && r.mean_mse == 0.0));
    }

    #[test]
    fn unit_scale_matches_rescaled_variance() {
        let g = DVector::from_vec(vec![0.0, 3.0, 4.0]);
        let beta = vec![DVector::from_vec(vec![1.0, 0.5])];
        let out = unit_scale_beta(&g, &beta).unwrap();
        // v(γ/‖γ‖) = v(γ)/25, so log-variance drops by log 25.
        assert!((out[0][0] - (1.0 - 25f64.ln())).abs() < 1e-15);
        assert_eq!(out[0][1], 0.5);
    }

    #[test]
    fn mean_and_se() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
