//! Higher-order projections found one at a time on the orthogonal
//! complement of the components already identified.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_covariance, Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::{fit_with_restarts, EmConfig, FitResult, HMatrix};
use crate::rng;
use crate::serde_util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    /// Projections in original coordinates, `γᵀH₀γ = 1` (or `‖γ‖ = 1` under
    /// the identity constraint).
    #[serde(with = "serde_util::vectors")]
    pub gammas: Vec<DVector<f64>>,
    /// Per-component fits; `params.gamma` is the matching entry of `gammas`.
    pub fits: Vec<FitResult>,
    /// `DfD(Γ^{(j)})` for `j = 1..r`.
    pub dfd_trace: Vec<f64>,
    /// Leading components with DfD within the threshold.
    pub accepted: usize,
    pub k: usize,
    pub dfd_threshold: f64,
    /// Error that stopped the extraction early, if any.
    pub failure: Option<String>,
}

impl ComponentSet {
    pub fn accepted_gammas(&self) -> &[DVector<f64>] {
        &self.gammas[..self.accepted]
    }

    pub fn accepted_fits(&self) -> &[FitResult] {
        &self.fits[..self.accepted]
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

fn gamma_matrix(gammas: &[DVector<f64>], p: usize) -> Result<DMatrix<f64>> {
    if gammas.iter().any(|g| g.len() != p) {
        return Err(Error::DimensionMismatch("projection length differs from p".into()));
    }
    Ok(DMatrix::from_columns(gammas))
}

/// Orthonormal basis of the complement of `span(Γ)`.
pub fn complement_basis(gammas: &[DVector<f64>], p: usize) -> Result<DMatrix<f64>> {
    let r = gammas.len();
    if r >= p {
        return Err(Error::NoComplementLeft { r, p });
    }
    if r == 0 {
        return Ok(DMatrix::identity(p, p));
    }
    let g = gamma_matrix(gammas, p)?;
    linalg::orthogonal_complement(&g).ok_or(Error::DegenerateProjections)
}

/// Expresses every subject in the coordinates of `q` (`p × m`, orthonormal
/// columns): `Ỹ = YQ`, `S̃ = QᵀSQ`.
pub fn reduce_to_basis(d: &Dataset, q: &DMatrix<f64>) -> Result<Dataset> {
    if q.nrows() != d.p() {
        return Err(Error::DimensionMismatch("basis rows differ from p".into()));
    }
    let subjects = d
        .subjects()
        .iter()
        .map(|s| {
            let mut out = match &s.y {
                Some(y) => {
                    let yq = y * q;
                    let cov = sample_covariance(&yq);
                    SubjectRecord {
                        s: cov,
                        y: Some(yq),
                        ..s.clone()
                    }
                }
                None => {
                    let mut cov = q.transpose() * &s.s * q;
                    linalg::symmetrize(&mut cov);
                    SubjectRecord { s: cov, ..s.clone() }
                }
            };
            out.t = s.t;
            out
        })
        .collect();
    Dataset::new(subjects)
}

/// Reduced dataset on the complement of `span(Γ)` and its basis `Q`.
pub fn deflate(d: &Dataset, gammas: &[DVector<f64>]) -> Result<(Dataset, DMatrix<f64>)> {
    let q = complement_basis(gammas, d.p())?;
    Ok((reduce_to_basis(d, &q)?, q))
}

/// `Ŷ = Y(I − UUᵀ)` in original coordinates, `U` an orthonormal basis of
/// `span(Γ)`. Sample covariances of the result are rank deficient.
pub fn remove_components(d: &Dataset, gammas: &[DVector<f64>]) -> Result<Dataset> {
    let p = d.p();
    let q = complement_basis(gammas, p)?;
    let projector = &q * q.transpose();
    let subjects = d
        .subjects()
        .iter()
        .map(|s| {
            let y = s.y.as_ref().ok_or_else(|| Error::RawDataRequired(s.id.clone()))?;
            let yh = y * &projector;
            Ok(SubjectRecord {
                s: sample_covariance(&yh),
                y: Some(yh),
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(subjects)
}

/// `Π_i [det diag(ΓᵀS_iΓ) / det(ΓᵀS_iΓ)]^{T_i / Σ T}`, in the log domain.
pub fn dfd(gammas: &[DVector<f64>], d: &Dataset) -> Result<f64> {
    if gammas.is_empty() {
        return Err(Error::InvalidConfig("DfD needs at least one projection".into()));
    }
    let g = gamma_matrix(gammas, d.p())?;
    if gammas.len() == 1 {
        // 1×1 determinants cancel exactly.
        for (i, s) in d.subjects().iter().enumerate() {
            if !(s.projected_variance(&gammas[0]) > 0.0) {
                return Err(Error::DfDSingular(i));
            }
        }
        return Ok(1.0);
    }
    let total = d.total_observations() as f64;
    let mut acc = 0.0;
    for (i, s) in d.subjects().iter().enumerate() {
        let mut m = g.transpose() * &s.s * &g;
        linalg::symmetrize(&mut m);
        let mut log_diag = 0.0;
        for j in 0..m.nrows() {
            if !(m[(j, j)] > 0.0) {
                return Err(Error::DfDSingular(i));
            }
            log_diag += m[(j, j)].ln();
        }
        let log_det = linalg::log_det_spd(&m).ok_or(Error::DfDSingular(i))?;
        acc += (s.t as f64 / total) * (log_diag - log_det);
    }
    Ok(acc.exp())
}

/// Number of components to keep: the largest `r` such that
/// `dfd_trace[j] ≤ threshold` for all `j < r`.
pub fn select_num_components(cs: &ComponentSet, threshold: f64) -> usize {
    count_within_threshold(&cs.dfd_trace, threshold)
}

pub fn count_within_threshold(dfd_trace: &[f64], threshold: f64) -> usize {
    dfd_trace.iter().take_while(|&&v| v <= threshold).count().max(1).min(dfd_trace.len())
}

fn original_constraint(d: &Dataset, cfg: &EmConfig) -> Result<DMatrix<f64>> {
    match cfg.h_matrix {
        HMatrix::Pooled => d.pooled_covariance(),
        HMatrix::Identity => Ok(DMatrix::identity(d.p(), d.p())),
    }
}

/// Fits components sequentially on the deflated data until `r_max` are
/// found or the DfD threshold is exceeded. Fit errors after the first
/// component end the search and are recorded in `failure`.
pub fn extract_components(d: &Dataset, k: usize, r_max: usize, cfg: &EmConfig) -> Result<ComponentSet> {
    if r_max == 0 || r_max > d.p().saturating_sub(1).max(1) {
        return Err(Error::InvalidConfig(format!("max components must be in 1..={}", d.p().saturating_sub(1).max(1))));
    }
    let h0 = original_constraint(d, cfg)?;
    let mut set = ComponentSet {
        gammas: Vec::new(),
        fits: Vec::new(),
        dfd_trace: Vec::new(),
        accepted: 0,
        k,
        dfd_threshold: cfg.dfd_threshold,
        failure: None,
    };
    for r in 0..r_max {
        let step = || -> Result<(DVector<f64>, FitResult)> {
            let (reduced, q) = deflate(d, &set.gammas)?;
            let mut local = cfg.clone();
            local.seed = rng::derive(cfg.seed, rng::tag::COMPONENT, r as u64);
            let mut fit = fit_with_restarts(&reduced, k, &local)?;
            let mut gamma = &q * &fit.params.gamma;
            let scale = linalg::quad_form(&h0, &gamma).sqrt();
            if !(scale > 0.0) {
                return Err(Error::ZeroVector);
            }
            gamma /= scale;
            // Keep the variance model consistent with the rescaled projection.
            let shift = -2.0 * scale.ln();
            for b in &mut fit.params.beta {
                b[0] += shift;
            }
            fit.params.gamma = gamma.clone();
            Ok((gamma, fit))
        };
        let (gamma, fit) = match step() {
            Ok(v) => v,
            Err(e) if r > 0 => {
                log::warn!("component {} failed: {e}", r + 1);
                set.failure = Some(format!("component {}: {e}", r + 1));
                break;
            }
            Err(e) => return Err(e),
        };
        let mut trial = set.gammas.clone();
        trial.push(gamma.clone());
        let value = match dfd(&trial, d) {
            Ok(v) => v,
            Err(e) => {
                set.failure = Some(format!("component {}: {e}", r + 1));
                break;
            }
        };
        set.gammas.push(gamma);
        set.fits.push(fit);
        set.dfd_trace.push(value);
        if value > cfg.dfd_threshold {
            break;
        }
        set.accepted += 1;
    }
    Ok(set)
}
