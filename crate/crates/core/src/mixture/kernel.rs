//! Computations that only need the projected variances `v_i = γᵀ S_i γ`
//! together with the covariates. Both the full EM and the fixed-projection
//! EM (bootstrap, initial profiling) run on these.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
const RESP_FLOOR: f64 = 1e-300;
pub(crate) const EMPTY_CLUSTER_MASS: f64 = 1e-6;

/// Covariates and observation counts in row-major form.
#[derive(Clone, Debug)]
pub(crate) struct Design {
    /// `n × q1`
    pub x: DMatrix<f64>,
    /// `n × q2`
    pub w: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl Design {
    pub fn from_dataset(d: &crate::dataset::Dataset) -> Design {
        let n = d.n();
        let subjects = d.subjects();
        Design {
            x: DMatrix::from_fn(n, d.q1(), |i, j| subjects[i].x[j]),
            w: DMatrix::from_fn(n, d.q2(), |i, j| subjects[i].w[j]),
            t: subjects.iter().map(|s| s.t as f64).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Design {
        Design {
            x: self.x.select_rows(indices),
            w: self.w.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    fn x_dot(&self, i: usize, beta: &DVector<f64>) -> f64 {
        self.x.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
    }

    fn w_dot(&self, i: usize, alpha: &DVector<f64>) -> f64 {
        self.w.row(i).iter().zip(alpha.iter()).map(|(a, b)| a * b).sum()
    }
}

/// `−(T/2)·[log 2π + xᵀβ + exp(−xᵀβ)·v]`
#[inline]
pub(crate) fn log_density(t: f64, xb: f64, v: f64) -> f64 {
    -0.5 * t * (LN_2PI + xb + (-xb).exp() * v)
}

/// Row-wise log-softmax of `wᵢᵀα_k`.
pub(crate) fn log_gating(design: &Design, alpha: &[DVector<f64>]) -> DMatrix<f64> {
    let n = design.n();
    let k = alpha.len();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            let a = design.w_dot(i, &alpha[c]);
            out[(i, c)] = a;
            m = m.max(a);
        }
        let lse = m + (0..k).map(|c| (out[(i, c)] - m).exp()).sum::<f64>().ln();
        for c in 0..k {
            out[(i, c)] -= lse;
        }
    }
    out
}

/// `log π_k(w_i) + log φ_k(z_i | x_i)` for every subject and cluster.
pub(crate) fn log_weights(
    design: &Design,
    v: &[f64],
    beta: &[DVector<f64>],
    alpha: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let mut lw = log_gating(design, alpha);
    for i in 0..design.n() {
        for (c, b) in beta.iter().enumerate() {
            let ld = log_density(design.t[i], design.x_dot(i, b), v[i]);
            if ld.is_nan() {
                return Err(Error::NumericOverflow("expert density"));
            }
            lw[(i, c)] += ld;
        }
    }
    Ok(lw)
}

/// Normalised responsibilities and the observed log-likelihood
/// `Σ_i logsumexp_k lw[i,k]`.
pub(crate) fn normalize(lw: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = lw.shape();
    let mut eta = DMatrix::zeros(n, k);
    let mut loglik = 0.0;
    for i in 0..n {
        let m = lw.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::DegenerateResponsibility(i));
        }
        if !m.is_finite() {
            return Err(Error::NumericOverflow("log weights"));
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = (lw[(i, c)] - m).exp();
            eta[(i, c)] = e;
            sum += e;
        }
        loglik += m + sum.ln();
        let mut floored = 0.0;
        for c in 0..k {
            let e = (eta[(i, c)] / sum).max(RESP_FLOOR);
            eta[(i, c)] = e;
            floored += e;
        }
        for c in 0..k {
            eta[(i, c)] /= floored;
        }
    }
    Ok((eta, loglik))
}

/// Aborts when some cluster has no meaningful weight anywhere.
pub(crate) fn check_clusters(eta: &DMatrix<f64>) -> Result<()> {
    for c in 0..eta.ncols() {
        let max = eta.column(c).iter().cloned().fold(0.0, f64::max);
        if max < EMPTY_CLUSTER_MASS {
            return Err(Error::EmptyCluster(c));
        }
    }
    Ok(())
}

/// `ℓ_{s+1}` restricted to one cluster: `Σ_i (T_i/2) η_ik [xᵢᵀβ + exp(−xᵢᵀβ) v_i]`.
pub(crate) fn beta_objective(design: &Design, eta_k: &[f64], v: &[f64], beta: &DVector<f64>) -> f64 {
    (0..design.n())
        .map(|i| {
            let xb = design.x_dot(i, beta);
            0.5 * design.t[i] * eta_k[i] * (xb + (-xb).exp() * v[i])
        })
        .sum()
}

/// Gradient and Hessian of [`beta_objective`].
pub(crate) fn beta_derivatives(
    design: &Design,
    eta_k: &[f64],
    v: &[f64],
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let q = beta.len();
    let mut grad = DVector::zeros(q);
    let mut hess = DMatrix::zeros(q, q);
    for i in 0..design.n() {
        let a = 0.5 * design.t[i] * eta_k[i];
        if a == 0.0 {
            continue;
        }
        let xi = design.x.row(i);
        let xb = design.x_dot(i, beta);
        let r = (-xb).exp() * v[i];
        let g = a * (1.0 - r);
        let h = a * r;
        for j in 0..q {
            grad[j] += g * xi[j];
            for l in 0..=j {
                hess[(j, l)] += h * xi[j] * xi[l];
            }
        }
    }
    for j in 0..q {
        for l in 0..j {
            hess[(l, j)] = hess[(j, l)];
        }
    }
    (grad, hess)
}

/// Newton-Raphson with step halving for one cluster's variance coefficients.
/// Returns the coefficients and the final gradient max-norm.
pub(crate) fn beta_newton(
    design: &Design,
    eta_k: &[f64],
    v: &[f64],
    init: &DVector<f64>,
    cluster: usize,
    max_iter: usize,
) -> Result<(DVector<f64>, f64)> {
    let mass: f64 = eta_k.iter().zip(&design.t).map(|(e, t)| e * t).sum();
    if !(mass > 0.0) {
        return Err(Error::EmptyCluster(cluster));
    }
    let mut beta = init.clone();
    let mut obj = beta_objective(design, eta_k, v, &beta);
    if !obj.is_finite() {
        return Err(Error::NumericOverflow("variance model objective"));
    }
    let (mut grad, mut hess) = beta_derivatives(design, eta_k, v, &beta);
    for _ in 0..max_iter {
        if crate::linalg::max_abs(&grad) <= 1e-8 {
            break;
        }
        let chol = hess.clone().cholesky().ok_or(Error::EmptyCluster(cluster))?;
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = &beta - &step * scale;
            let cand_obj = beta_objective(design, eta_k, v, &cand);
            if cand_obj.is_finite() && cand_obj < obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, o)) => {
                beta = b;
                obj = o;
                let d = beta_derivatives(design, eta_k, v, &beta);
                grad = d.0;
                hess = d.1;
            }
            None => break,
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NumericOverflow("variance coefficients"));
    }
    Ok((beta, crate::linalg::max_abs(&grad)))
}

/// Weighted multinomial log-likelihood `Σ_i u_i Σ_k η_ik log π_k(w_i)`.
pub(crate) fn gating_objective(design: &Design, eta: &DMatrix<f64>, weights: &[f64], alpha: &[DVector<f64>]) -> f64 {
    let lg = log_gating(design, alpha);
    let mut acc = 0.0;
    for i in 0..design.n() {
        for c in 0..alpha.len() {
            if eta[(i, c)] > 0.0 {
                acc += weights[i] * eta[(i, c)] * lg[(i, c)];
            }
        }
    }
    acc
}

/// Gradient (w.r.t. α_2..α_K, stacked) and negative Hessian of
/// [`gating_objective`].
pub(crate) fn gating_derivatives(
    design: &Design,
    eta: &DMatrix<f64>,
    weights: &[f64],
    alpha: &[DVector<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let q = design.w.ncols();
    let dim = (k - 1) * q;
    let mut grad = DVector::zeros(dim);
    let mut neg_hess = DMatrix::zeros(dim, dim);
    let lg = log_gating(design, alpha);
    for i in 0..design.n() {
        let u = weights[i];
        let wi = design.w.row(i);
        let pi: Vec<f64> = (0..k).map(|c| lg[(i, c)].exp()).collect();
        for a in 1..k {
            let r = u * (eta[(i, a)] - pi[a]);
            for j in 0..q {
                grad[(a - 1) * q + j] += r * wi[j];
            }
            for b in 1..k {
                let coef = u * pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]);
                if coef == 0.0 {
                    continue;
                }
                for j in 0..q {
                    for l in 0..q {
                        neg_hess[((a - 1) * q + j, (b - 1) * q + l)] += coef * wi[j] * wi[l];
                    }
                }
            }
        }
    }
    (grad, neg_hess)
}

/// Damped Newton ascent for the gating coefficients with `α_1 ≡ 0`.
/// Returns the coefficients and the final score max-norm.
pub(crate) fn gating_newton(
    design: &Design,
    eta: &DMatrix<f64>,
    weights: &[f64],
    init: &[DVector<f64>],
    ridge: f64,
    max_iter: usize,
) -> Result<(Vec<DVector<f64>>, f64)> {
    let k = init.len();
    let q = design.w.ncols();
    let mut alpha: Vec<DVector<f64>> = init.to_vec();
    alpha[0] = DVector::zeros(q);
    if k == 1 {
        return Ok((alpha, 0.0));
    }
    let mut obj = gating_objective(design, eta, weights, &alpha);
    let (mut grad, mut neg_hess) = gating_derivatives(design, eta, weights, &alpha);
    for _ in 0..max_iter {
        if crate::linalg::max_abs(&grad) <= 1e-8 {
            break;
        }
        let dim = neg_hess.nrows();
        let mut reg = neg_hess.clone();
        for j in 0..dim {
            reg[(j, j)] += ridge;
        }
        let step = match reg.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => reg.lu().solve(&grad).ok_or(Error::GatingDiverged)?,
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand: Vec<DVector<f64>> = alpha
                .iter()
                .enumerate()
                .map(|(c, a)| {
                    if c == 0 {
                        a.clone()
                    } else {
                        a + step.rows((c - 1) * q, q) * scale
                    }
                })
                .collect();
            let cand_obj = gating_objective(design, eta, weights, &cand);
            if cand_obj.is_finite() && cand_obj > obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((a, o)) => {
                alpha = a;
                obj = o;
                let d = gating_derivatives(design, eta, weights, &alpha);
                grad = d.0;
                neg_hess = d.1;
            }
            None => break,
        }
    }
    if alpha.iter().flat_map(|a| a.iter()).any(|v| !v.is_finite()) || !obj.is_finite() {
        return Err(Error::GatingDiverged);
    }
    Ok((alpha, crate::linalg::max_abs(&grad)))
}

/// Per-subject weight `c_i = Σ_k (T_i/2) η_ik exp(−xᵢᵀβ_k)` of `S_i` in the
/// projection objective.
pub(crate) fn projection_weights(design: &Design, eta: &DMatrix<f64>, beta: &[DVector<f64>]) -> Vec<f64> {
    (0..design.n())
        .map(|i| {
            beta.iter()
                .enumerate()
                .map(|(c, b)| 0.5 * design.t[i] * eta[(i, c)] * (-design.x_dot(i, b)).exp())
                .sum()
        })
        .collect()
}

/// Hard labels: row argmax with smallest-index tie-break.
pub(crate) fn argmax_rows(eta: &DMatrix<f64>) -> Vec<usize> {
    (0..eta.nrows())
        .map(|i| {
            let mut best = 0;
            for c in 1..eta.ncols() {
                if eta[(i, c)] > eta[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
