//! Nonparametric bootstrap for the gating and variance coefficients with
//! each projection held at its full-data estimate.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{fit_projected, prefit_projected, Design, EmConfig, ModelParams};
use crate::perm;
use crate::rng;

/// Linear combination `cᵀβ_k` reported for every component and cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub name: String,
    /// Length `q1`.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Two-sided miss rate: intervals use the `level/2` and `1 − level/2` quantiles.
    pub level: f64,
    pub seed: u64,
    /// Extra random starts per replicate on top of the warm start.
    pub restarts_per_replicate: usize,
    pub contrasts: Vec<Contrast>,
    /// Term names for `x` columns (defaults to `x0, x1, ...`).
    pub x_names: Vec<String>,
    /// Term names for `w` columns (defaults to `w0, w1, ...`).
    pub w_names: Vec<String>,
    pub em: EmConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 200,
            level: 0.05,
            seed: 0,
            restarts_per_replicate: 0,
            contrasts: Vec::new(),
            x_names: Vec::new(),
            w_names: Vec::new(),
            em: EmConfig::default(),
        }
    }
}

/// Coefficients of one component, in a fixed order: every `β_k` entry,
/// then `α_k` for `k ≥ 2`, then contrasts per cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    /// One-based.
    pub component: usize,
    /// One-based.
    pub cluster: usize,
    /// `beta`, `alpha` or `contrast`.
    pub kind: String,
    pub term: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    #[serde(rename = "B")]
    pub b: usize,
    pub level: f64,
    /// Successful replicates per accepted component.
    pub successes: Vec<usize>,
    pub intervals: Vec<Interval>,
    /// First few replicate failure messages.
    pub failures: Vec<String>,
}

/// Full-data quantities each replicate needs: design, projected variances
/// and reference estimates for every accepted component.
pub struct BootstrapReference {
    design: Design,
    components: Vec<ReferenceComponent>,
    em: EmConfig,
}

struct ReferenceComponent {
    gamma: DVector<f64>,
    v: Vec<f64>,
    params: ModelParams,
}

impl BootstrapReference {
    /// Refits every accepted component with its projection held fixed and a
    /// tight tolerance, so that the reference is a fixed point of the
    /// replicate EM.
    pub fn new(d: &Dataset, cs: &ComponentSet, em: &EmConfig) -> Result<Self> {
        if cs.accepted == 0 {
            return Err(Error::InvalidConfig("component set has no accepted component".into()));
        }
        let design = Design::from_dataset(d);
        let mut tight = em.clone();
        tight.tol = 1e-14;
        tight.max_iter = em.max_iter.max(2000);
        let components = cs
            .accepted_fits()
            .iter()
            .map(|f| {
                let gamma = f.params.gamma.clone();
                f.params.validate(d.p(), d.q1(), d.q2())?;
                let v: Vec<f64> = d
                    .subjects()
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let v = s.projected_variance(&gamma);
                        if v > 0.0 {
                            Ok(v)
                        } else {
                            Err(Error::ZeroProjectedVariance(i))
                        }
                    })
                    .collect::<Result<_>>()?;
                let refit = fit_projected(&design, &v, &gamma, &f.params.beta, &f.params.alpha, &tight)?;
                let params = polish(&design, &v, &gamma, refit.params, em)?;
                Ok(ReferenceComponent { gamma, v, params })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BootstrapReference {
            design,
            components,
            em: em.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn estimates(&self) -> Vec<&ModelParams> {
        self.components.iter().map(|c| &c.params).collect()
    }

    /// Fixed-projection EM on the subjects at `indices`, warm-started from
    /// the reference and aligned to its cluster labels. One entry per
    /// accepted component.
    pub fn replicate(&self, indices: &[usize], restarts: usize, rng: &mut impl Rng) -> Vec<Result<ModelParams>> {
        let design = self.design.subset(indices);
        self.components
            .iter()
            .map(|c| {
                let v: Vec<f64> = indices.iter().map(|&i| c.v[i]).collect();
                let warm = fit_projected(&design, &v, &c.gamma, &c.params.beta, &c.params.alpha, &self.em);
                let mut best = warm;
                if restarts > 0 {
                    if let Some(alt) = prefit_projected(&design, &v, &c.gamma, c.params.k(), restarts, rng, &self.em) {
                        let better = match &best {
                            Ok(b) => alt.loglik > b.loglik,
                            Err(_) => true,
                        };
                        if better {
                            best = Ok(alt);
                        }
                    }
                }
                let fit = best?;
                align(&fit.params, &c.params)
            })
            .collect()
    }
}

/// Single EM steps until the parameters stop moving. A log-likelihood
/// tolerance only pins the parameters to about its square root.
fn polish(design: &Design, v: &[f64], gamma: &DVector<f64>, mut params: ModelParams, em: &EmConfig) -> Result<ModelParams> {
    let step = EmConfig {
        max_iter: 1,
        ..em.clone()
    };
    for _ in 0..POLISH_MAX_STEPS {
        let next = fit_projected(design, v, gamma, &params.beta, &params.alpha, &step)?.params;
        let moved = params
            .beta
            .iter()
            .zip(&next.beta)
            .chain(params.alpha.iter().zip(&next.alpha))
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        params = next;
        if moved <= POLISH_TOL {
            break;
        }
    }
    Ok(params)
}

const POLISH_TOL: f64 = 1e-13;
const POLISH_MAX_STEPS: usize = 20_000;

/// Relabels `params` so that new cluster `j` is the replicate cluster
/// closest in `β` to reference cluster `j`.
pub fn align(params: &ModelParams, reference: &ModelParams) -> Result<ModelParams> {
    let k = params.k();
    let order = perm::best_assignment(k, |j, m| (&params.beta[m] - &reference.beta[j]).norm_squared())?;
    Ok(params.permuted(&order))
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(lower, upper)` percentile interval.
pub fn percentile_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (quantile(&sorted, level / 2.0), quantile(&sorted, 1.0 - level / 2.0))
}

/// Draws `n` indices uniformly with replacement.
pub fn resample_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn name(names: &[String], prefix: &str, j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| format!("{prefix}{j}"))
}

/// Flattened statistics of one component: labels and values.
fn statistics(params: &ModelParams, cfg: &BootstrapConfig) -> Vec<(usize, &'static str, String, f64)> {
    let mut out = Vec::new();
    for (c, b) in params.beta.iter().enumerate() {
        for (j, &v) in b.iter().enumerate() {
            out.push((c, "beta", name(&cfg.x_names, "x", j), v));
        }
    }
    for (c, a) in params.alpha.iter().enumerate().skip(1) {
        for (j, &v) in a.iter().enumerate() {
            out.push((c, "alpha", name(&cfg.w_names, "w", j), v));
        }
    }
    for (c, b) in params.beta.iter().enumerate() {
        for con in &cfg.contrasts {
            let v: f64 = con.weights.iter().zip(b.iter()).map(|(w, x)| w * x).sum();
            out.push((c, "contrast", con.name.clone(), v));
        }
    }
    out
}

/// Runs `cfg.replicates` resamples in parallel and summarises each
/// coefficient by its percentile interval.
pub fn bootstrap_with(d: &Dataset, cs: &ComponentSet, cfg: &BootstrapConfig) -> Result<BootstrapReport> {
    if cfg.replicates < 2 {
        return Err(Error::InvalidConfig("B must be at least 2".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidConfig("level must lie in (0, 1)".into()));
    }
    if cfg.contrasts.iter().any(|c| c.weights.len() != d.q1()) {
        return Err(Error::DimensionMismatch("contrast weights must have length q1".into()));
    }
    let reference = BootstrapReference::new(d, cs, &cfg.em)?;
    let n = reference.n();
    let replicates: Vec<Vec<Result<ModelParams>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(cfg.seed, rng::tag::BOOTSTRAP, b as u64);
            let indices = resample_indices(n, &mut rng);
            reference.replicate(&indices, cfg.restarts_per_replicate, &mut rng)
        })
        .collect();
    summarise(&reference, &replicates, cfg)
}

/// Convenience form with default EM settings and no contrasts.
pub fn bootstrap_inference(d: &Dataset, cs: &ComponentSet, b: usize, level: f64, seed: u64) -> Result<BootstrapReport> {
    let cfg = BootstrapConfig {
        replicates: b,
        level,
        seed,
        ..BootstrapConfig::default()
    };
    bootstrap_with(d, cs, &cfg)
}

fn summarise(reference: &BootstrapReference, replicates: &[Vec<Result<ModelParams>>], cfg: &BootstrapConfig) -> Result<BootstrapReport> {
    let b = replicates.len();
    let mut successes = Vec::new();
    let mut intervals = Vec::new();
    let mut failures = Vec::new();
    for (j, comp) in reference.components.iter().enumerate() {
        let point = statistics(&comp.params, cfg);
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); point.len()];
        let mut ok = 0;
        for rep in replicates {
            match &rep[j] {
                Ok(params) => {
                    ok += 1;
                    for (col, (_, _, _, v)) in columns.iter_mut().zip(statistics(params, cfg)) {
                        col.push(v);
                    }
                }
                Err(e) => {
                    if failures.len() < 20 {
                        failures.push(format!("component {}: {e}", j + 1));
                    }
                }
            }
        }
        if 2 * ok < b {
            return Err(Error::BootstrapUnstable {
                successes: ok,
                requested: b,
            });
        }
        successes.push(ok);
        for ((cluster, kind, term, estimate), col) in point.into_iter().zip(columns) {
            let (lower, upper) = percentile_interval(&col, cfg.level);
            intervals.push(Interval {
                component: j + 1,
                cluster: cluster + 1,
                kind: kind.to_string(),
                term,
                estimate,
                lower,
                upper,
            });
        }
    }
    Ok(BootstrapReport {
        b,
        level: cfg.level,
        successes,
        intervals,
        failures,
    })
}

impl BootstrapReport {
    /// CSV with columns `component, cluster, kind, term, estimate, lower, upper`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "cluster", "kind", "term", "estimate", "lower", "upper"])?;
        for r in &self.intervals {
            w.write_record([
                r.component.to_string(),
                r.cluster.to_string(),
                r.kind.clone(),
                r.term.clone(),
                r.estimate.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
