//! Synthetic multi-subject data with a common (or partially common)
//! eigenbasis, covariate-driven eigenvalues on selected dimensions and
//! covariate-driven cluster memberships.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::rng;
use crate::serde_util;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    #[default]
    None,
    /// Adds `c·x₁x₂` to every cluster's log-variance.
    VarianceInteraction,
    /// As above, plus `c·w₁x₁` on the logits of clusters `k ≥ 2`.
    BothInteractions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Eigenstructure {
    #[default]
    Common,
    /// The first `shared` eigenvectors are common; the rest are redrawn per
    /// subject inside their orthogonal complement.
    PartialCommon { shared: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Noise {
    #[default]
    Gaussian,
    /// Multivariate t rescaled so that its covariance is `Σ_i`.
    StudentT { df: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// One-based eigenvector indices carrying the mixture model.
    pub structured_dims: Vec<usize>,
    /// `[dim][cluster]` gating coefficients; cluster 1 must be zero.
    pub alpha_true: Vec<Vec<Vec<f64>>>,
    /// `[dim][cluster]` variance coefficients on `x = (1, x₁, x₂)`.
    pub beta_true: Vec<Vec<Vec<f64>>>,
    /// Mean log-eigenvalue of the first and last unstructured dimension.
    pub eigen_mean_range: (f64, f64),
    pub eigen_sd: f64,
    pub misspec: Misspecification,
    pub interaction_coef: f64,
    pub eigenstructure: Eigenstructure,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::two_dims(100, 0)
    }
}

impl SimConfig {
    /// Structured dimensions 2 and 4 with the reference coefficients,
    /// `p = 50`, `T = 100`.
    pub fn two_dims(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            p: 50,
            n,
            t: 100,
            structured_dims: vec![2, 4],
            alpha_true: vec![vec![vec![0.0, 0.0], vec![0.5, -1.0]], vec![vec![0.0, 0.0], vec![-0.25, 0.5]]],
            beta_true: vec![
                vec![vec![1.0, 1.0, -1.0], vec![-1.0, -1.0, 1.0]],
                vec![vec![0.5, 0.5, -0.5], vec![0.5, -0.5, 0.5]],
            ],
            eigen_mean_range: (3.0, -1.0),
            eigen_sd: 0.2,
            misspec: Misspecification::None,
            interaction_coef: 0.5,
            eigenstructure: Eigenstructure::Common,
            noise: Noise::Gaussian,
            seed,
        }
    }

    /// Only dimension 2 structured, gating on `w = (1, w₁)`.
    pub fn dim2(n: usize, seed: u64) -> SimConfig {
        let mut c = SimConfig::two_dims(n, seed);
        c.structured_dims.truncate(1);
        c.alpha_true.truncate(1);
        c.beta_true.truncate(1);
        c
    }

    /// Only dimension 2 structured, intercept-only gating (`w = (1)`).
    pub fn dim2_intercept_only(n: usize, seed: u64) -> SimConfig {
        let mut c = SimConfig::dim2(n, seed);
        c.alpha_true = vec![vec![vec![0.0], vec![0.5]]];
        c
    }

    /// Dimensions 2 and 4 with intercept-only gating.
    pub fn two_dims_intercept_only(n: usize, seed: u64) -> SimConfig {
        let mut c = SimConfig::two_dims(n, seed);
        c.alpha_true = vec![vec![vec![0.0], vec![0.5]], vec![vec![0.0], vec![-0.25]]];
        c
    }

    pub fn q1(&self) -> usize {
        3
    }

    pub fn q2(&self) -> usize {
        self.alpha_true.first().and_then(|a| a.first()).map_or(1, |a| a.len())
    }

    pub fn k(&self) -> usize {
        self.beta_true.first().map_or(1, |b| b.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.p == 0 || self.n == 0 || self.t == 0 {
            return bad("p, n and T must be positive");
        }
        let mut seen = std::collections::HashSet::new();
        for &d in &self.structured_dims {
            if d == 0 || d > self.p || !seen.insert(d) {
                return bad("structured_dims must be distinct indices in 1..=p");
            }
        }
        let r = self.structured_dims.len();
        if self.alpha_true.len() != r || self.beta_true.len() != r {
            return bad("alpha_true and beta_true need one entry per structured dimension");
        }
        let (k, q2) = (self.k(), self.q2());
        if q2 == 0 || q2 > 2 {
            return bad("gating covariates are (1) or (1, w1)");
        }
        for (a, b) in self.alpha_true.iter().zip(&self.beta_true) {
            if a.len() != k || b.len() != k || k == 0 {
                return bad("every structured dimension needs the same K");
            }
            if a.iter().any(|v| v.len() != q2) || b.iter().any(|v| v.len() != 3) {
                return bad("alpha vectors need length q2 and beta vectors length 3");
            }
            if a[0].iter().any(|&v| v != 0.0) {
                return bad("alpha of cluster 1 must be zero");
            }
        }
        if !(self.eigen_sd >= 0.0) {
            return bad("eigen_sd must be non-negative");
        }
        if let Eigenstructure::PartialCommon { shared } = self.eigenstructure {
            if shared > self.p {
                return bad("shared eigenvector count exceeds p");
            }
        }
        if let Noise::StudentT { df } = self.noise {
            if !(df > 2.0) {
                return bad("student-t noise needs df > 2");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimGroundTruth {
    /// Common eigenbasis (for partial common structure only the first
    /// `shared` columns are shared by every subject).
    #[serde(with = "serde_util::matrix")]
    pub pi: DMatrix<f64>,
    pub structured_dims: Vec<usize>,
    /// `[dim][subject]` one-based cluster labels.
    pub memberships: Vec<Vec<usize>>,
    pub x: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub alpha_true: Vec<Vec<Vec<f64>>>,
    pub beta_true: Vec<Vec<Vec<f64>>>,
}

impl SimGroundTruth {
    /// True projection of the `j`-th structured dimension.
    pub fn direction(&self, j: usize) -> DVector<f64> {
        self.pi.column(self.structured_dims[j] - 1).into_owned()
    }

    pub fn beta(&self, j: usize) -> Vec<DVector<f64>> {
        self.beta_true[j].iter().map(|b| DVector::from_vec(b.clone())).collect()
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthonormal(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn softmax_draw(logits: &[f64], rng: &mut impl Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, v) in e.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    e.len() - 1
}

struct Subject {
    record: SubjectRecord,
    labels: Vec<usize>,
}

fn unstructured_means(cfg: &SimConfig) -> Vec<f64> {
    let free = cfg.p - cfg.structured_dims.len();
    let (hi, lo) = cfg.eigen_mean_range;
    (0..free)
        .map(|r| if free == 1 { hi } else { hi + (lo - hi) * r as f64 / (free - 1) as f64 })
        .collect()
}

fn draw_subject(cfg: &SimConfig, pi: &DMatrix<f64>, means: &[f64], i: usize) -> Result<Subject> {
    let p = cfg.p;
    let mut rng = rng::stream(cfg.seed, rng::tag::SUBJECT, i as u64);
    let x1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let x2: f64 = rng.sample(StandardNormal);
    let x = DVector::from_vec(vec![1.0, x1, x2]);
    let w1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let w = if cfg.q2() == 2 {
        DVector::from_vec(vec![1.0, w1])
    } else {
        DVector::from_vec(vec![1.0])
    };
    let mut log_lambda = vec![0.0; p];
    let mut labels = Vec::with_capacity(cfg.structured_dims.len());
    for (j, &dim) in cfg.structured_dims.iter().enumerate() {
        let logits: Vec<f64> = cfg.alpha_true[j]
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let base: f64 = a.iter().zip(w.iter()).map(|(u, v)| u * v).sum();
                if k > 0 && cfg.misspec == Misspecification::BothInteractions {
                    base + cfg.interaction_coef * w1 * x1
                } else {
                    base
                }
            })
            .collect();
        let k = softmax_draw(&logits, &mut rng);
        let mut value: f64 = cfg.beta_true[j][k].iter().zip(x.iter()).map(|(b, v)| b * v).sum();
        if cfg.misspec != Misspecification::None {
            value += cfg.interaction_coef * x1 * x2;
        }
        log_lambda[dim - 1] = value;
        labels.push(k + 1);
    }
    let mut free = means.iter();
    for (d, slot) in log_lambda.iter_mut().enumerate() {
        if !cfg.structured_dims.contains(&(d + 1)) {
            let m = *free.next().expect("one mean per unstructured dimension");
            let normal = Normal::new(m, cfg.eigen_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            *slot = normal.sample(&mut rng);
        }
    }
    let basis = match cfg.eigenstructure {
        Eigenstructure::Common => None,
        Eigenstructure::PartialCommon { shared } => {
            let rest = p - shared;
            let mut rot_rng = rng::stream(cfg.seed, rng::tag::ROTATION, i as u64 + 1);
            let r = random_orthonormal(rest, &mut rot_rng);
            let tail = pi.columns(shared, rest) * r;
            let mut b = pi.clone();
            b.columns_mut(shared, rest).copy_from(&tail);
            Some(b)
        }
    };
    let basis = basis.as_ref().unwrap_or(pi);
    // Y = Z Λ^{1/2} Πᵀ has rows with covariance ΠΛΠᵀ.
    let sd: Vec<f64> = log_lambda.iter().map(|l| (0.5 * l).exp()).collect();
    let mut z = DMatrix::from_fn(cfg.t, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (j, s) in sd.iter().enumerate() {
        z.column_mut(j).scale_mut(*s);
    }
    if let Noise::StudentT { df } = cfg.noise {
        let chi = ChiSquared::new(df).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for t in 0..cfg.t {
            let u: f64 = chi.sample(&mut rng);
            let scale = ((df - 2.0) / u).sqrt();
            z.row_mut(t).scale_mut(scale);
        }
    }
    let y = z * basis.transpose();
    let record = SubjectRecord::from_observations(format!("s{i:04}"), y, x, w)?;
    Ok(Subject { record, labels })
}

/// Draws a dataset and its ground truth. Subjects use independent RNG
/// streams, so the result does not depend on the thread count.
pub fn generate_dataset(cfg: &SimConfig) -> Result<(Dataset, SimGroundTruth)> {
    cfg.validate()?;
    let mut rot = rng::stream(cfg.seed, rng::tag::ROTATION, 0);
    let pi = random_orthonormal(cfg.p, &mut rot);
    let means = unstructured_means(cfg);
    let subjects: Vec<Subject> = (0..cfg.n)
        .into_par_iter()
        .map(|i| draw_subject(cfg, &pi, &means, i))
        .collect::<Result<_>>()?;
    let r = cfg.structured_dims.len();
    let memberships = (0..r).map(|j| subjects.iter().map(|s| s.labels[j]).collect()).collect();
    let x = subjects.iter().map(|s| s.record.x.iter().copied().collect()).collect();
    let w = subjects.iter().map(|s| s.record.w.iter().copied().collect()).collect();
    let truth = SimGroundTruth {
        pi,
        structured_dims: cfg.structured_dims.clone(),
        memberships,
        x,
        w,
        alpha_true: cfg.alpha_true.clone(),
        beta_true: cfg.beta_true.clone(),
    };
    let d = Dataset::new(subjects.into_iter().map(|s| s.record).collect())?;
    Ok((d, truth))
}

/// Population covariance `Σ_i = ΠΛ_iΠᵀ` is not stored; this recomputes it
/// for common eigenstructure designs from a subject's log-eigenvalues.
pub fn population_covariance(pi: &DMatrix<f64>, log_lambda: &[f64]) -> DMatrix<f64> {
    let lam = DVector::from_iterator(log_lambda.len(), log_lambda.iter().map(|l| l.exp()));
    let mut s = pi * DMatrix::from_diagonal(&lam) * pi.transpose();
    crate::linalg::symmetrize(&mut s);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthonormal(50, &mut rng);
        assert!((q.transpose() * &q - DMatrix::identity(50, 50)).norm() < 1e-10);
        let one = random_orthonormal(1, &mut rng);
        assert_eq!(one[(0, 0)], 1.0);
        let mut other = ChaCha8Rng::seed_from_u64(2);
        let q2 = random_orthonormal(50, &mut other);
        assert!((q - q2).norm() > 0.1);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = SimConfig::two_dims(6, 9);
        cfg.p = 6;
        cfg.t = 5;
        let (a, ta) = generate_dataset(&cfg).unwrap();
        let (b, tb) = generate_dataset(&cfg).unwrap();
        assert_eq!(ta, tb);
        for (x, y) in a.subjects().iter().zip(b.subjects()) {
            assert_eq!(x.y, y.y);
        }
        assert!(tb.memberships.iter().flatten().all(|&l| l == 1 || l == 2));
    }

    #[test]
    fn sample_covariance_converges() {
        // Single subject, Σ rebuilt from the structured log-eigenvalue.
        let mut cfg = SimConfig::dim2(1, 3);
        cfg.p = 5;
        cfg.t = 10_000;
        cfg.eigen_sd = 0.0;
        let (d, truth) = generate_dataset(&cfg).unwrap();
        let s = &d.subjects()[0];
        let k = truth.memberships[0][0] - 1;
        let mut logs: Vec<f64> = unstructured_means(&cfg);
        logs.insert(1, s.x.dot(&DVector::from_vec(cfg.beta_true[0][k].clone())));
        let sigma = population_covariance(&truth.pi, &logs);
        let rel = (&s.s - &sigma).norm() / sigma.norm();
        assert!(rel <= 0.1, "relative error {rel}");
    }

    #[test]
    fn gating_frequency_matches_softmax() {
        let mut cfg = SimConfig::dim2(10_000, 4);
        cfg.p = 2;
        cfg.t = 1;
        let (_, truth) = generate_dataset(&cfg).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for (i, w) in truth.w.iter().enumerate() {
            if w[1] == 0.0 {
                total += 1;
                hits += usize::from(truth.memberships[0][i] == 2);
            }
        }
        let freq = hits as f64 / total as f64;
        let expected = 0.5f64.exp() / (1.0 + 0.5f64.exp());
        assert!((freq - expected).abs() < 0.03, "{freq} vs {expected}");
    }

    #[test]
    fn structured_variance_follows_log_linear_model() {
        // β₁ = (1, 1, −1) at x = (1, 1, −1) gives σ² = e³.
        let b = [1.0, 1.0, -1.0];
        let x = [1.0, 1.0, -1.0];
        let v: f64 = b.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>().exp();
        assert!((v - 3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn t_noise_has_heavy_tails() {
        let kurtosis = |noise: Noise| {
            let mut cfg = SimConfig::dim2(1, 5);
            cfg.p = 3;
            cfg.t = 50_000;
            cfg.noise = noise;
            let (d, truth) = generate_dataset(&cfg).unwrap();
            let z = d.subjects()[0].y.as_ref().unwrap() * truth.direction(0);
            let n = z.len() as f64;
            let m2 = z.iter().map(|v| v * v).sum::<f64>() / n;
            let m4 = z.iter().map(|v| v.powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2)
        };
        let g = kurtosis(Noise::Gaussian);
        let t = kurtosis(Noise::StudentT { df: 5.0 });
        assert!((g - 3.0).abs() < 0.15, "gaussian kurtosis {g}");
        assert!(t > 4.0, "t kurtosis {t}");
    }

    #[test]
    fn invalid_configs() {
        let mut c = SimConfig::two_dims(10, 0);
        c.structured_dims = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = SimConfig::two_dims(10, 0);
        c.alpha_true[0][0][0] = 1.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::two_dims(10, 0);
        c.noise = Noise::StudentT { df: 2.0 };
        assert!(c.validate().is_err());
    }
}
