//! Multi-subject data model: per-subject observations, covariates and
//! cached sample covariances, plus the pooled covariance used as the
//! projection constraint.

mod io;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub use io::{load_dataset, write_covariances, write_covariates, write_timeseries};

/// One subject: observations (optional), covariates and sample covariance.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub id: String,
    /// `T × p` observations, rows are time points. `None` when the subject
    /// was loaded from a precomputed covariance.
    pub y: Option<DMatrix<f64>>,
    /// Expert covariates, intercept first.
    pub x: DVector<f64>,
    /// Gating covariates, intercept first.
    pub w: DVector<f64>,
    /// `S = Σ_t y_t y_tᵀ / T`.
    pub s: DMatrix<f64>,
    pub t: usize,
}

/// Sample covariance with divisor `T` (no centering), exactly symmetric.
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let t = y.nrows().max(1) as f64;
    let mut s = y.tr_mul(y) / t;
    linalg::symmetrize(&mut s);
    s
}

impl SubjectRecord {
    pub fn from_observations(
        id: impl Into<String>,
        y: DMatrix<f64>,
        x: DVector<f64>,
        w: DVector<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if y.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!("subject {id} has no observations")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("observations"));
        }
        let s = sample_covariance(&y);
        let t = y.nrows();
        let rec = SubjectRecord { id, y: Some(y), x, w, s, t };
        rec.check_intercepts()?;
        Ok(rec)
    }

    pub fn from_covariance(
        id: impl Into<String>,
        s: DMatrix<f64>,
        t: usize,
        x: DVector<f64>,
        w: DVector<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if !s.is_square() {
            return Err(Error::DimensionMismatch(format!("covariance of {id} is not square")));
        }
        if t == 0 {
            return Err(Error::DimensionMismatch(format!("subject {id} has T = 0")));
        }
        let mut s = s;
        let asym = (0..s.nrows())
            .flat_map(|i| (0..s.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (s[(i, j)] - s[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 * (1.0 + linalg::matrix_inf_norm(&s)) {
            return Err(Error::DimensionMismatch(format!("covariance of {id} is not symmetric")));
        }
        linalg::symmetrize(&mut s);
        let rec = SubjectRecord { id, y: None, x, w, s, t };
        rec.check_intercepts()?;
        Ok(rec)
    }

    fn check_intercepts(&self) -> Result<()> {
        if self.x.is_empty() || self.w.is_empty() || self.x[0] != 1.0 || self.w[0] != 1.0 {
            return Err(Error::MissingIntercept(self.id.clone()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.s.nrows()
    }

    /// `γᵀ S γ`.
    pub fn projected_variance(&self, gamma: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.s, gamma)
    }
}

/// Immutable collection of subjects sharing `p`, `q1` and `q2`.
#[derive(Clone, Debug)]
pub struct Dataset {
    subjects: Vec<SubjectRecord>,
    p: usize,
    q1: usize,
    q2: usize,
    pooled: OnceLock<DMatrix<f64>>,
}

impl Dataset {
    /// Validates shared dimensions. Subject order is kept as given.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::DimensionMismatch("dataset has no subjects".into()))?;
        let (p, q1, q2) = (first.p(), first.x.len(), first.w.len());
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if s.p() != p || s.x.len() != q1 || s.w.len() != q2 {
                return Err(Error::DimensionMismatch(format!(
                    "subject {} has (p, q1, q2) = ({}, {}, {}), expected ({p}, {q1}, {q2})",
                    s.id,
                    s.p(),
                    s.x.len(),
                    s.w.len()
                )));
            }
            if let Some(y) = &s.y {
                if y.ncols() != p {
                    return Err(Error::DimensionMismatch(format!("observations of {} have wrong width", s.id)));
                }
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Dataset {
            subjects,
            p,
            q1,
            q2,
            pooled: OnceLock::new(),
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q1(&self) -> usize {
        self.q1
    }

    pub fn q2(&self) -> usize {
        self.q2
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.t).sum()
    }

    pub fn has_raw_data(&self) -> bool {
        self.subjects.iter().all(|s| s.y.is_some())
    }

    /// Subjects at the given indices (with repetition), ids suffixed to stay unique.
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset> {
        let subjects = indices
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut s = self.subjects[i].clone();
                s.id = format!("{}#{slot}", s.id);
                s
            })
            .collect();
        Dataset::new(subjects)
    }

    /// `H = Σ_i T_i S_i / Σ_i T_i`, required to be positive definite.
    pub fn pooled_covariance(&self) -> Result<DMatrix<f64>> {
        if let Some(h) = self.pooled.get() {
            return Ok(h.clone());
        }
        let h = pooled_unchecked(&self.subjects, self.p);
        let (values, _) = linalg::sym_eigen(&h);
        if !linalg::is_scaled_pd(&values, h.trace()) {
            return Err(Error::SingularPooled {
                min_eigenvalue: values.iter().cloned().fold(f64::INFINITY, f64::min),
            });
        }
        let _ = self.pooled.set(h.clone());
        Ok(h)
    }
}

fn pooled_unchecked(subjects: &[SubjectRecord], p: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(p, p);
    let mut total = 0.0;
    for s in subjects {
        let t = s.t as f64;
        h += &s.s * t;
        total += t;
    }
    h /= total;
    linalg::symmetrize(&mut h);
    h
}

/// Free-function form of [`Dataset::pooled_covariance`].
pub fn pooled_covariance(d: &Dataset) -> Result<DMatrix<f64>> {
    d.pooled_covariance()
}

/// Removes column means per subject and optionally scales every column to
/// unit variance (divisor `T`, so that `diag(S) = 1`). Covariances are
/// recomputed.
pub fn center_scale(d: &Dataset, unit_variance: bool) -> Result<Dataset> {
    let mut out = Vec::with_capacity(d.n());
    for s in d.subjects() {
        let y = s.y.as_ref().ok_or_else(|| Error::RawDataRequired(s.id.clone()))?;
        if y.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!("subject {} needs T >= 2", s.id)));
        }
        let t = y.nrows() as f64;
        let mut y = y.clone();
        for j in 0..y.ncols() {
            let mut col = y.column_mut(j);
            let mean = col.sum() / t;
            col.add_scalar_mut(-mean);
            if unit_variance {
                let var = col.norm_squared() / t;
                let sd = var.sqrt();
                let scale = col.amax().max(mean.abs()).max(1.0);
                if !(sd > 1e-12 * scale) {
                    return Err(Error::ZeroVariance { id: s.id.clone(), column: j });
                }
                col.unscale_mut(sd);
            }
        }
        out.push(SubjectRecord::from_observations(s.id.clone(), y, s.x.clone(), s.w.clone())?);
    }
    Dataset::new(out)
}
