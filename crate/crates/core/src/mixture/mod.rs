//! Single-component estimation.
//!
//! A subject's series projected on `γ` is modelled as a zero-mean normal
//! whose log-variance is `xᵢᵀβ_k` in cluster `k`, with cluster probabilities
//! given by a softmax of `wᵢᵀα_k` (`α_1 ≡ 0`). The EM alternates
//! responsibilities, a weighted multinomial logistic fit for `α`, Newton
//! updates of `β`, and a generalized eigenproblem for `γ` under `γᵀHγ = 1`.

mod kernel;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::serde_util;

pub(crate) use kernel::Design;

/// Which matrix defines the projection constraint `γᵀHγ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HMatrix {
    #[default]
    Pooled,
    Identity,
}

/// Per-subject weights of the gating regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatingWeights {
    /// `T_i`, as in the complete-data log-likelihood.
    #[default]
    ObservationCount,
    /// Unit weights.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Relative log-likelihood change that stops the EM.
    pub tol: f64,
    pub max_iter: usize,
    /// Random initialisations per fit (the spectral start comes on top).
    pub n_restarts: usize,
    pub seed: u64,
    pub h_matrix: HMatrix,
    /// Newton iterations for the variance coefficients.
    pub newton_max_iter: usize,
    pub gating_max_iter: usize,
    /// Ridge added to the gating Hessian.
    pub ridge: f64,
    pub dfd_threshold: f64,
    pub spectral_init: bool,
    /// Fixed-projection EM starts used to score each spectral candidate.
    pub prefit_starts: usize,
    pub gating_weights: GatingWeights,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-6,
            max_iter: 500,
            n_restarts: 10,
            seed: 0,
            h_matrix: HMatrix::Pooled,
            newton_max_iter: 50,
            gating_max_iter: 100,
            ridge: 1e-8,
            dfd_threshold: 2.0,
            spectral_init: true,
            prefit_starts: 10,
            gating_weights: GatingWeights::ObservationCount,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig("tol must be positive and max_iter >= 1".into()));
        }
        if self.n_restarts == 0 && !self.spectral_init {
            return Err(Error::InvalidConfig("need at least one initialisation".into()));
        }
        if !(self.ridge >= 0.0) || !(self.dfd_threshold >= 1.0) {
            return Err(Error::InvalidConfig("ridge must be >= 0 and dfd_threshold >= 1".into()));
        }
        Ok(())
    }
}

/// Projection, expert and gating coefficients of a `K`-cluster model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(with = "serde_util::vector")]
    pub gamma: DVector<f64>,
    #[serde(with = "serde_util::vectors")]
    pub beta: Vec<DVector<f64>>,
    /// `alpha[0]` is the zero vector.
    #[serde(with = "serde_util::vectors")]
    pub alpha: Vec<DVector<f64>>,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self, p: usize, q1: usize, q2: usize) -> Result<()> {
        let k = self.beta.len();
        if k == 0 || self.alpha.len() != k {
            return Err(Error::DimensionMismatch("need K >= 1 beta and alpha vectors".into()));
        }
        if self.gamma.len() != p
            || self.beta.iter().any(|b| b.len() != q1)
            || self.alpha.iter().any(|a| a.len() != q2)
        {
            return Err(Error::DimensionMismatch(format!(
                "parameters do not match (p, q1, q2) = ({p}, {q1}, {q2})"
            )));
        }
        if self.alpha[0].iter().any(|&a| a != 0.0) {
            return Err(Error::InvalidConfig("alpha of the reference cluster must be zero".into()));
        }
        let finite = self
            .gamma
            .iter()
            .chain(self.beta.iter().flat_map(|b| b.iter()))
            .chain(self.alpha.iter().flat_map(|a| a.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NumericOverflow("parameters"));
        }
        Ok(())
    }

    /// Reorders clusters so that new cluster `j` is old cluster `order[j]`,
    /// re-referencing `α` to the new first cluster.
    pub fn permuted(&self, order: &[usize]) -> ModelParams {
        let reference = self.alpha[order[0]].clone();
        ModelParams {
            gamma: self.gamma.clone(),
            beta: order.iter().map(|&c| self.beta[c].clone()).collect(),
            alpha: order.iter().map(|&c| &self.alpha[c] - &reference).collect(),
        }
    }
}

/// Posterior cluster probabilities, `n × K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    #[serde(with = "serde_util::matrix")]
    pub eta: DMatrix<f64>,
}

impl Responsibilities {
    pub fn labels(&self) -> Vec<usize> {
        kernel::argmax_rows(&self.eta)
    }
}

/// Gradient norms and eigen residual at the end of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Max-norm of the variance-model gradient after the last Newton solve.
    pub beta_gradient: f64,
    /// Max-norm of the weighted multinomial score after the last gating fit.
    pub gating_gradient: f64,
    /// Generalized eigenvalue of the last projection update.
    pub eigenvalue: f64,
    /// Largest decrease of the log-likelihood between iterations (0 if none).
    pub max_decrease: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    #[serde(rename = "responsibilities")]
    pub resp: Responsibilities,
    /// Zero-based hard labels.
    pub labels: Vec<usize>,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    pub diagnostics: Diagnostics,
}

/// Constraint matrix `H` and its inverse square root.
#[derive(Clone, Debug)]
pub(crate) struct Constraint {
    h: DMatrix<f64>,
    whiten: DMatrix<f64>,
}

impl Constraint {
    pub fn new(h: &DMatrix<f64>) -> Result<Constraint> {
        let (values, vectors) = linalg::sym_eigen(h);
        if !linalg::is_scaled_pd(&values, h.trace()) {
            return Err(Error::SingularPooled {
                min_eigenvalue: values.iter().cloned().fold(f64::INFINITY, f64::min),
            });
        }
        let inv_sqrt = values.map(|v| 1.0 / v.sqrt());
        let whiten = &vectors * DMatrix::from_diagonal(&inv_sqrt) * vectors.transpose();
        let mut whiten = whiten;
        linalg::symmetrize(&mut whiten);
        Ok(Constraint { h: h.clone(), whiten })
    }

    pub fn for_dataset(d: &Dataset, cfg: &EmConfig) -> Result<Constraint> {
        match cfg.h_matrix {
            HMatrix::Pooled => Constraint::new(&d.pooled_covariance()?),
            HMatrix::Identity => Constraint::new(&DMatrix::identity(d.p(), d.p())),
        }
    }

    pub fn normalize(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        let q = linalg::quad_form(&self.h, g);
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(g / q.sqrt())
    }

    /// Smallest generalized eigenpair of `(A, H)` through
    /// `H^{-1/2} A H^{-1/2}`.
    pub fn solve(&self, a: &DMatrix<f64>) -> (DVector<f64>, f64) {
        let mut b = &self.whiten * a * &self.whiten;
        linalg::symmetrize(&mut b);
        let (values, vectors) = linalg::sym_eigen(&b);
        let g0 = vectors.column(0).into_owned();
        let mut gamma = &self.whiten * g0;
        // γᵀHγ = 1 holds up to rounding; renormalise so it holds tightly.
        let q = linalg::quad_form(&self.h, &gamma);
        gamma /= q.sqrt();
        linalg::fix_sign(&mut gamma);
        (gamma, values[0])
    }
}

fn projected_variances(d: &Dataset, gamma: &DVector<f64>) -> Result<Vec<f64>> {
    d.subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = s.projected_variance(gamma);
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::ZeroProjectedVariance(i))
            }
        })
        .collect()
}

fn gating_weights(design: &Design, cfg: &EmConfig) -> Vec<f64> {
    match cfg.gating_weights {
        GatingWeights::ObservationCount => design.t.clone(),
        GatingWeights::Unit => vec![1.0; design.n()],
    }
}

fn eta_column(eta: &DMatrix<f64>, c: usize) -> Vec<f64> {
    eta.column(c).iter().copied().collect()
}

/// `log φ_k(z_i | x_i)`, the log of the product over time points of normal
/// densities of `γᵀy_it`, from the sufficient statistic `γᵀS_iγ`.
pub fn log_expert_density(subject: &SubjectRecord, gamma: &DVector<f64>, beta_k: &DVector<f64>) -> Result<f64> {
    if gamma.len() != subject.p() || beta_k.len() != subject.x.len() {
        return Err(Error::DimensionMismatch("gamma or beta length".into()));
    }
    let v = subject.projected_variance(gamma);
    let xb = subject.x.dot(beta_k);
    let ld = kernel::log_density(subject.t as f64, xb, v);
    if !ld.is_finite() {
        return Err(Error::NumericOverflow("expert density"));
    }
    Ok(ld)
}

fn validated(d: &Dataset, params: &ModelParams) -> Result<(Design, Vec<f64>)> {
    params.validate(d.p(), d.q1(), d.q2())?;
    let design = Design::from_dataset(d);
    let v = projected_variances(d, &params.gamma)?;
    Ok((design, v))
}

/// Responsibilities `η_ik ∝ π_k(w_i) φ_k(z_i | x_i)`, evaluated in the log domain.
pub fn e_step(d: &Dataset, params: &ModelParams) -> Result<Responsibilities> {
    let (design, v) = validated(d, params)?;
    let lw = kernel::log_weights(&design, &v, &params.beta, &params.alpha)?;
    let (eta, _) = kernel::normalize(&lw)?;
    Ok(Responsibilities { eta })
}

/// Observed log-likelihood `Σ_i log Σ_k π_k(w_i) φ_k(z_i | x_i)`.
pub fn observed_loglik(d: &Dataset, params: &ModelParams) -> Result<f64> {
    let (design, v) = validated(d, params)?;
    let lw = kernel::log_weights(&design, &v, &params.beta, &params.alpha)?;
    let (_, ll) = kernel::normalize(&lw)?;
    if !ll.is_finite() {
        return Err(Error::NumericOverflow("log-likelihood"));
    }
    Ok(ll)
}

fn check_resp(d: &Dataset, resp: &Responsibilities) -> Result<()> {
    if resp.eta.nrows() != d.n() || resp.eta.ncols() == 0 {
        return Err(Error::DimensionMismatch("responsibilities do not match the dataset".into()));
    }
    Ok(())
}

/// Gating coefficients maximising `Σ_i Σ_k T_i η_ik log π_k(w_i)` with
/// `α_1 = 0`, starting from zero.
pub fn fit_gating(resp: &Responsibilities, d: &Dataset) -> Result<Vec<DVector<f64>>> {
    fit_gating_with(resp, d, &EmConfig::default())
}

pub fn fit_gating_with(resp: &Responsibilities, d: &Dataset, cfg: &EmConfig) -> Result<Vec<DVector<f64>>> {
    check_resp(d, resp)?;
    let design = Design::from_dataset(d);
    let init = vec![DVector::zeros(d.q2()); resp.eta.ncols()];
    let weights = gating_weights(&design, cfg);
    let (alpha, _) = kernel::gating_newton(&design, &resp.eta, &weights, &init, cfg.ridge, cfg.gating_max_iter)?;
    Ok(alpha)
}

/// Newton-Raphson update of every cluster's variance coefficients for fixed
/// responsibilities and projection.
pub fn update_beta_newton(
    resp: &Responsibilities,
    d: &Dataset,
    gamma: &DVector<f64>,
    beta_init: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_resp(d, resp)?;
    if beta_init.len() != resp.eta.ncols() || beta_init.iter().any(|b| b.len() != d.q1()) {
        return Err(Error::DimensionMismatch("beta_init".into()));
    }
    if gamma.len() != d.p() {
        return Err(Error::DimensionMismatch("gamma".into()));
    }
    let design = Design::from_dataset(d);
    let v = projected_variances(d, gamma)?;
    let max_iter = EmConfig::default().newton_max_iter;
    (0..beta_init.len())
        .map(|c| kernel::beta_newton(&design, &eta_column(&resp.eta, c), &v, &beta_init[c], c, max_iter).map(|r| r.0))
        .collect()
}

/// Gradient of `ℓ_{s+1}` with respect to `β_k`.
pub fn beta_gradient(resp: &Responsibilities, d: &Dataset, gamma: &DVector<f64>, k: usize, beta: &DVector<f64>) -> Result<DVector<f64>> {
    check_resp(d, resp)?;
    let design = Design::from_dataset(d);
    let v = projected_variances(d, gamma)?;
    Ok(kernel::beta_derivatives(&design, &eta_column(&resp.eta, k), &v, beta).0)
}

/// `ℓ_{s+1}` for a single cluster.
pub fn beta_objective(resp: &Responsibilities, d: &Dataset, gamma: &DVector<f64>, k: usize, beta: &DVector<f64>) -> Result<f64> {
    check_resp(d, resp)?;
    let design = Design::from_dataset(d);
    let v = projected_variances(d, gamma)?;
    Ok(kernel::beta_objective(&design, &eta_column(&resp.eta, k), &v, beta))
}

/// Weighted multinomial objective of the gating fit and its score.
pub fn gating_objective(resp: &Responsibilities, d: &Dataset, alpha: &[DVector<f64>]) -> Result<(f64, DVector<f64>)> {
    check_resp(d, resp)?;
    let design = Design::from_dataset(d);
    let weights = design.t.clone();
    let obj = kernel::gating_objective(&design, &resp.eta, &weights, alpha);
    let (grad, _) = kernel::gating_derivatives(&design, &resp.eta, &weights, alpha);
    Ok((obj, grad))
}

/// `A = Σ_i Σ_k (T_i/2) η_ik exp(−xᵢᵀβ_k) S_i`.
pub fn projection_matrix(resp: &Responsibilities, d: &Dataset, beta: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    check_resp(d, resp)?;
    let design = Design::from_dataset(d);
    Ok(weighted_covariance(d, &kernel::projection_weights(&design, &resp.eta, beta)))
}

fn weighted_covariance(d: &Dataset, c: &[f64]) -> DMatrix<f64> {
    let p = d.p();
    let mut a = DMatrix::zeros(p, p);
    for (s, &ci) in d.subjects().iter().zip(c) {
        a += &s.s * ci;
    }
    linalg::symmetrize(&mut a);
    a
}

/// Minimises `γᵀAγ` subject to `γᵀHγ = 1`; returns the generalized
/// eigenvector for the smallest eigenvalue and that eigenvalue.
pub fn update_gamma(a: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    if a.shape() != h.shape() || !a.is_square() {
        return Err(Error::DimensionMismatch("A and H must be square of equal size".into()));
    }
    Ok(Constraint::new(h)?.solve(a))
}

/// Cluster probabilities for new gating covariates.
pub fn predict_membership(w_new: &DVector<f64>, params: &ModelParams) -> Result<Vec<f64>> {
    if params.alpha.iter().any(|a| a.len() != w_new.len()) {
        return Err(Error::DimensionMismatch("w_new length".into()));
    }
    let logits: Vec<f64> = params.alpha.iter().map(|a| a.dot(w_new)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / sum).collect())
}

struct Run {
    beta: Vec<DVector<f64>>,
    alpha: Vec<DVector<f64>>,
    gamma: DVector<f64>,
    eta: DMatrix<f64>,
    loglik: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    diagnostics: Diagnostics,
}

/// Projection handling inside the EM loop.
enum Projection<'a> {
    Free { d: &'a Dataset, constraint: &'a Constraint },
    Fixed,
}

fn run_em(
    design: &Design,
    mut v: Vec<f64>,
    projection: Projection<'_>,
    init_gamma: DVector<f64>,
    init_beta: &[DVector<f64>],
    init_alpha: &[DVector<f64>],
    cfg: &EmConfig,
) -> Result<Run> {
    let weights = gating_weights(design, cfg);
    let mut gamma = init_gamma;
    let mut beta = init_beta.to_vec();
    let mut alpha = init_alpha.to_vec();
    let mut lw = kernel::log_weights(design, &v, &beta, &alpha)?;
    let (mut eta, mut loglik) = kernel::normalize(&lw)?;
    let mut trace = vec![loglik];
    let mut diagnostics = Diagnostics::default();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        kernel::check_clusters(&eta)?;
        let (a, ggrad) = kernel::gating_newton(design, &eta, &weights, &alpha, cfg.ridge, cfg.gating_max_iter)?;
        alpha = a;
        let mut bgrad: f64 = 0.0;
        for c in 0..beta.len() {
            let (b, g) = kernel::beta_newton(design, &eta_column(&eta, c), &v, &beta[c], c, cfg.newton_max_iter)?;
            beta[c] = b;
            bgrad = bgrad.max(g);
        }
        diagnostics.beta_gradient = bgrad;
        diagnostics.gating_gradient = ggrad;
        if let Projection::Free { d, constraint } = &projection {
            let c = kernel::projection_weights(design, &eta, &beta);
            let a = weighted_covariance(d, &c);
            let (g, lambda) = constraint.solve(&a);
            gamma = g;
            diagnostics.eigenvalue = lambda;
            v = projected_variances(d, &gamma)?;
        }
        lw = kernel::log_weights(design, &v, &beta, &alpha)?;
        let (new_eta, new_ll) = kernel::normalize(&lw)?;
        if !new_ll.is_finite() {
            return Err(Error::NumericOverflow("log-likelihood"));
        }
        trace.push(new_ll);
        diagnostics.max_decrease = diagnostics.max_decrease.max(loglik - new_ll);
        let change = (new_ll - loglik).abs() / (1.0 + loglik.abs());
        eta = new_eta;
        loglik = new_ll;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Run {
        beta,
        alpha,
        gamma,
        eta,
        loglik,
        trace,
        iterations,
        converged,
        diagnostics,
    })
}

impl Run {
    fn into_fit(self, restart_index: usize) -> FitResult {
        let labels = kernel::argmax_rows(&self.eta);
        FitResult {
            params: ModelParams {
                gamma: self.gamma,
                beta: self.beta,
                alpha: self.alpha,
            },
            resp: Responsibilities { eta: self.eta },
            labels,
            loglik: self.loglik,
            trace: self.trace,
            iterations: self.iterations,
            converged: self.converged,
            restart_index,
            diagnostics: self.diagnostics,
        }
    }
}

/// Runs the EM from `init` until the relative log-likelihood change drops
/// below `cfg.tol` or `cfg.max_iter` is reached (then `converged = false`).
/// `K` is the number of clusters in `init`.
pub fn em_fit(d: &Dataset, init: &ModelParams, cfg: &EmConfig) -> Result<FitResult> {
    let constraint = Constraint::for_dataset(d, cfg)?;
    em_fit_with(d, &Design::from_dataset(d), &constraint, init, cfg, 0)
}

fn em_fit_with(
    d: &Dataset,
    design: &Design,
    constraint: &Constraint,
    init: &ModelParams,
    cfg: &EmConfig,
    restart_index: usize,
) -> Result<FitResult> {
    init.validate(d.p(), d.q1(), d.q2())?;
    let gamma = constraint.normalize(&init.gamma)?;
    let v = projected_variances(d, &gamma)?;
    let run = run_em(
        design,
        v,
        Projection::Free { d, constraint },
        gamma,
        &init.beta,
        &init.alpha,
        cfg,
    )?;
    Ok(run.into_fit(restart_index))
}

/// EM with the projection held fixed at `gamma` (no renormalisation).
pub fn fit_fixed_projection(d: &Dataset, gamma: &DVector<f64>, init: &ModelParams, cfg: &EmConfig) -> Result<FitResult> {
    let mut init = init.clone();
    init.gamma = gamma.clone();
    init.validate(d.p(), d.q1(), d.q2())?;
    let design = Design::from_dataset(d);
    let v = projected_variances(d, gamma)?;
    fit_projected(&design, &v, gamma, &init.beta, &init.alpha, cfg)
}

/// Fixed-projection EM on precomputed projected variances.
pub(crate) fn fit_projected(
    design: &Design,
    v: &[f64],
    gamma: &DVector<f64>,
    beta: &[DVector<f64>],
    alpha: &[DVector<f64>],
    cfg: &EmConfig,
) -> Result<FitResult> {
    let run = run_em(design, v.to_vec(), Projection::Fixed, gamma.clone(), beta, alpha, cfg)?;
    Ok(run.into_fit(0))
}

/// Best of several fixed-projection EM runs: one start from a quantile split
/// of the single-cluster residuals, the rest from randomly perturbed
/// single-cluster coefficients.
pub(crate) fn prefit_projected(
    design: &Design,
    v: &[f64],
    gamma: &DVector<f64>,
    k: usize,
    starts: usize,
    rng: &mut impl Rng,
    cfg: &EmConfig,
) -> Option<FitResult> {
    let n = design.n();
    let q1 = design.x.ncols();
    let q2 = design.w.ncols();
    let ones = vec![1.0; n];
    let (pooled, _) = kernel::beta_newton(design, &ones, v, &DVector::zeros(q1), 0, cfg.newton_max_iter).ok()?;
    let zeros = vec![DVector::zeros(q2); k];
    if k == 1 {
        return fit_projected(design, v, gamma, &[pooled], &zeros, cfg).ok();
    }
    let resid: Vec<f64> = (0..n)
        .map(|i| v[i].ln() - design.x.row(i).iter().zip(pooled.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let spread = {
        let m = resid.iter().sum::<f64>() / n as f64;
        (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-3)
    };
    let col_sd: Vec<f64> = (0..q1)
        .map(|j| {
            let col = design.x.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut best: Option<FitResult> = None;
    for s in 0..starts.max(1) {
        let beta: Vec<DVector<f64>> = if s == 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| resid[a].total_cmp(&resid[b]));
            (0..k)
                .map(|c| {
                    let mut mask = vec![0.0; n];
                    for &i in &order[c * n / k..(c + 1) * n / k] {
                        mask[i] = 1.0;
                    }
                    kernel::beta_newton(design, &mask, v, &pooled, c, cfg.newton_max_iter)
                        .map(|r| r.0)
                        .unwrap_or_else(|_| pooled.clone())
                })
                .collect()
        } else {
            (0..k)
                .map(|_| {
                    let mut b = pooled.clone();
                    for j in 0..q1 {
                        let z: f64 = rng.sample(StandardNormal);
                        let scale = if j == 0 { spread } else { spread / col_sd[j] };
                        b[j] += z * scale;
                    }
                    b
                })
                .collect()
        };
        if let Ok(fit) = fit_projected(design, v, gamma, &beta, &zeros, cfg) {
            if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                best = Some(fit);
            }
        }
    }
    best
}

/// Random start: Gaussian direction normalised to `γᵀHγ = 1`, intercepts
/// from the projected variances of randomly chosen subjects, zero gating.
fn random_init(d: &Dataset, constraint: &Constraint, k: usize, rng: &mut impl Rng) -> Result<ModelParams> {
    let p = d.p();
    let raw = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let gamma = constraint.normalize(&raw)?;
    let picks: Vec<usize> = if d.n() >= k {
        sample(rng, d.n(), k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..d.n())).collect()
    };
    let beta = picks
        .iter()
        .map(|&i| {
            let mut b = DVector::zeros(d.q1());
            b[0] = d.subjects()[i].projected_variance(&gamma).max(f64::MIN_POSITIVE).ln();
            b
        })
        .collect();
    Ok(ModelParams {
        gamma,
        beta,
        alpha: vec![DVector::zeros(d.q2()); k],
    })
}

/// Candidates kept after the screening pass of the spectral start.
const SPECTRAL_KEEP: usize = 4;

/// Spectral start: every eigenvector of the pooled covariance is screened
/// by a short two-start fixed-projection EM; the best few are refitted with
/// `cfg.prefit_starts` starts and the winner's direction and coefficients
/// seed the full EM.
fn spectral_init(d: &Dataset, design: &Design, constraint: &Constraint, k: usize, cfg: &EmConfig) -> Result<ModelParams> {
    let pooled = d.pooled_covariance()?;
    let (_, vectors) = linalg::sym_eigen(&pooled);
    let candidates: Vec<(DVector<f64>, Vec<f64>)> = (0..d.p())
        .filter_map(|j| {
            let gamma = constraint.normalize(&vectors.column(j).into_owned()).ok()?;
            let v = projected_variances(d, &gamma).ok()?;
            Some((gamma, v))
        })
        .collect();
    let mut screen_cfg = cfg.clone();
    screen_cfg.max_iter = cfg.max_iter.min(25);
    screen_cfg.tol = cfg.tol.max(1e-6);
    let mut screened: Vec<(usize, f64)> = candidates
        .par_iter()
        .enumerate()
        .filter_map(|(j, (gamma, v))| {
            let mut rng = rng::stream(cfg.seed, rng::tag::SPECTRAL, j as u64);
            prefit_projected(design, v, gamma, k, 2, &mut rng, &screen_cfg).map(|f| (j, f.loglik))
        })
        .collect();
    screened.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    screened.truncate(SPECTRAL_KEEP);
    let mut prefit_cfg = cfg.clone();
    prefit_cfg.max_iter = cfg.max_iter.min(100);
    prefit_cfg.tol = cfg.tol.max(1e-8);
    let scored: Vec<Option<FitResult>> = screened
        .par_iter()
        .map(|&(j, _)| {
            let (gamma, v) = &candidates[j];
            let mut rng = rng::stream(cfg.seed, rng::tag::SPECTRAL, (d.p() + j) as u64);
            prefit_projected(design, v, gamma, k, cfg.prefit_starts, &mut rng, &prefit_cfg)
        })
        .collect();
    let best = scored
        .into_iter()
        .flatten()
        .reduce(|a, b| if b.loglik > a.loglik { b } else { a })
        .ok_or_else(|| Error::AllRestartsFailed(vec!["no spectral candidate could be fitted".into()]))?;
    Ok(best.params)
}

/// Runs the EM from `cfg.n_restarts` seeded random starts plus the spectral
/// start and keeps the highest observed log-likelihood (ties go to the
/// lower restart index). Deterministic given `cfg.seed`.
pub fn fit_with_restarts(d: &Dataset, k: usize, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let constraint = Constraint::for_dataset(d, cfg)?;
    let design = Design::from_dataset(d);
    let total = cfg.n_restarts + usize::from(cfg.spectral_init);
    let outcomes: Vec<Result<FitResult>> = (0..total)
        .into_par_iter()
        .map(|r| {
            let init = if r < cfg.n_restarts {
                let mut rng = rng::stream(cfg.seed, rng::tag::RESTART, r as u64);
                random_init(d, &constraint, k, &mut rng)?
            } else {
                spectral_init(d, &design, &constraint, k, cfg)?
            };
            em_fit_with(d, &design, &constraint, &init, cfg, r)
        })
        .collect();
    let mut failures = Vec::new();
    let mut best: Option<FitResult> = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::debug!("restart {r} failed: {e}");
                failures.push(format!("restart {r}: {e}"));
            }
        }
    }
    best.ok_or(Error::AllRestartsFailed(failures))
}
