//! Random instances and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use capclust::{Dataset, ModelParams, SubjectRecord};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(p: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

/// `GGᵀ/p + 0.1 I`.
pub fn random_spd(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = gaussian_matrix(p, p, rng);
    &g * g.transpose() / p as f64 + DMatrix::identity(p, p) * 0.1
}

/// Two-cluster data with `x = (1, x1)`, `w = (1, w1)` and a common `T`.
/// Returns the dataset and a random parameter set to start from.
pub fn random_instance(seed: u64, n_range: (usize, usize), p_range: (usize, usize), t: usize) -> (Dataset, ModelParams) {
    let mut rng = rng(seed);
    let n = rng.random_range(n_range.0..=n_range.1);
    let p = rng.random_range(p_range.0..=p_range.1);
    let dir = gaussian_vector(p, &mut rng).normalize();
    let mix = random_spd(p, &mut rng).cholesky().unwrap().l();
    let subjects = (0..n)
        .map(|i| {
            let x1: f64 = rng.sample(StandardNormal);
            let w1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let c = rng.random_bool(0.5);
            let log_var = if c { 1.0 + 0.5 * x1 } else { -1.0 - 0.3 * x1 };
            let noise = gaussian_matrix(t, p, &mut rng) * mix.transpose();
            let z = gaussian_vector(t, &mut rng) * (0.5 * log_var).exp();
            let y = noise + &z * dir.transpose();
            SubjectRecord::from_observations(format!("r{i:03}"), y, DVector::from_vec(vec![1.0, x1]), DVector::from_vec(vec![1.0, w1])).unwrap()
        })
        .collect();
    let d = Dataset::new(subjects).unwrap();
    let mut gamma = &dir + gaussian_vector(p, &mut rng) * 0.3;
    gamma /= capclust::linalg::quad_form(&d.pooled_covariance().unwrap(), &gamma).sqrt();
    let params = ModelParams {
        gamma,
        beta: vec![
            DVector::from_vec(vec![rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5)]),
            DVector::from_vec(vec![rng.random_range(-1.0..0.0), rng.random_range(-0.5..0.5)]),
        ],
        alpha: vec![DVector::zeros(2), DVector::from_vec(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])],
    };
    (d, params)
}

/// Log of the sum over all `K^n` latent assignments, from the raw
/// observations, the normal density and the softmax written out directly.
pub fn brute_force_loglik(d: &Dataset, params: &ModelParams) -> f64 {
    let k = params.beta.len();
    let n = d.n();
    let mut terms = Vec::new();
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        let mut acc = 0.0;
        for s in d.subjects() {
            let lab = c % k;
            c /= k;
            let scores: Vec<f64> = params.alpha.iter().map(|a| a.dot(&s.w)).collect();
            let denom: f64 = scores.iter().map(|v| v.exp()).sum();
            acc += (scores[lab].exp() / denom).ln();
            let var = s.x.dot(&params.beta[lab]).exp();
            let y = s.y.as_ref().expect("raw observations");
            for row in y.row_iter() {
                let z = row.transpose().dot(&params.gamma);
                acc += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - z * z / (2.0 * var);
            }
        }
        terms.push(acc);
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `(same in both, same in a only, same in b only, different in both)` by
/// enumerating every pair.
pub fn brute_pairs(a: &[usize], b: &[usize]) -> (f64, f64, f64, f64) {
    let mut out = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => out.0 += 1.0,
                (true, false) => out.1 += 1.0,
                (false, true) => out.2 += 1.0,
                (false, false) => out.3 += 1.0,
            }
        }
    }
    out
}

pub fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    let (n11, n10, n01, n00) = brute_pairs(a, b);
    let denom = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00);
    if denom == 0.0 {
        return 1.0;
    }
    2.0 * (n11 * n00 - n10 * n01) / denom
}

pub fn brute_jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (n11, n10, n01, _) = brute_pairs(a, b);
    if n11 + n10 + n01 == 0.0 {
        return 1.0;
    }
    n11 / (n11 + n10 + n01)
}

/// Minimum mismatch rate over every injective relabeling of `a` into a
/// label space large enough for both partitions.
pub fn brute_error(a: &[usize], b: &[usize]) -> f64 {
    let m = a.iter().chain(b).max().map_or(0, |v| v + 1);
    fn search(level: usize, m: usize, used: &mut Vec<bool>, map: &mut Vec<usize>, a: &[usize], b: &[usize], best: &mut usize) {
        if level == m {
            let hits = a.iter().zip(b).filter(|(x, y)| map[**x] == **y).count();
            *best = (*best).max(hits);
            return;
        }
        for target in 0..m {
            if !used[target] {
                used[target] = true;
                map.push(target);
                search(level + 1, m, used, map, a, b, best);
                map.pop();
                used[target] = false;
            }
        }
    }
    let mut best = 0;
    search(0, m, &mut vec![false; m], &mut Vec::new(), a, b, &mut best);
    1.0 - best as f64 / a.len() as f64
}

/// Central finite difference of `f` along coordinate `j`.
pub fn central_difference(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, j: usize, h: f64) -> f64 {
    let mut up = at.clone();
    up[j] += h;
    let mut dn = at.clone();
    dn[j] -= h;
    (f(&up) - f(&dn)) / (2.0 * h)
}
