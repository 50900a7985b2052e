//! Monte-Carlo replications: simulate, fit every method, score against
//! the ground truth and aggregate.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::components::{extract_components, ComponentSet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, ClusterScores};
use crate::mixture::EmConfig;
use crate::rng;
use crate::simgen::{generate_dataset, SimConfig, SimGroundTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Capclust,
    KmeansLowTri,
    KmeansLog,
    HierarchicalLowTri,
    HierarchicalLog,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Capclust,
        Method::KmeansLowTri,
        Method::KmeansLog,
        Method::HierarchicalLowTri,
        Method::HierarchicalLog,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Capclust => "CAPclust",
            Method::KmeansLowTri => "K-means (low.tri)",
            Method::KmeansLog => "K-means (log)",
            Method::HierarchicalLowTri => "Hierarchical (low.tri)",
            Method::HierarchicalLog => "Hierarchical (log)",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let key = s.to_ascii_lowercase().replace(['-', ' ', '(', ')', '.'], "_");
        match key.trim_matches('_') {
            "capclust" => Some(Method::Capclust),
            "kmeans_lowtri" | "kmeans_low_tri" | "k_means__low_tri" => Some(Method::KmeansLowTri),
            "kmeans_log" | "k_means__log" => Some(Method::KmeansLog),
            "hierarchical_lowtri" | "hierarchical_low_tri" | "hierarchical__low_tri" => Some(Method::HierarchicalLowTri),
            "hierarchical_log" | "hierarchical__log" => Some(Method::HierarchicalLog),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub sim: SimConfig,
    pub replications: usize,
    pub k: usize,
    pub max_components: usize,
    pub em: EmConfig,
    pub methods: Vec<Method>,
    pub kmeans_init: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            sim: SimConfig::default(),
            replications: 5,
            k: 2,
            max_components: 2,
            em: EmConfig::default(),
            methods: Method::ALL.to_vec(),
            kmeans_init: 10,
            seed: 0,
        }
    }
}

/// CAPclust output matched to one structured dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMatch {
    /// One-based accepted component with the highest similarity.
    pub component: usize,
    pub similarity: f64,
    /// Coefficients for the unit-norm projection, comparable with the truth.
    pub beta: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Matches every structured dimension to the accepted component most
/// similar to its true direction.
pub fn match_dimensions(cs: &ComponentSet, truth: &SimGroundTruth) -> Result<Vec<DimensionMatch>> {
    if cs.accepted == 0 {
        return Err(Error::InvalidConfig("no accepted component".into()));
    }
    (0..truth.structured_dims.len())
        .map(|j| {
            let dir = truth.direction(j);
            let mut best: Option<(usize, f64)> = None;
            for (c, g) in cs.accepted_gammas().iter().enumerate() {
                let s = metrics::projection_similarity(g, &dir)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            let (c, similarity) = best.expect("accepted components exist");
            let fit = &cs.fits[c];
            let beta = metrics::unit_scale_beta(&fit.params.gamma, &fit.params.beta)?;
            Ok(DimensionMatch {
                component: c + 1,
                similarity,
                beta: beta.iter().map(|b| b.iter().copied().collect()).collect(),
                labels: fit.labels.clone(),
            })
        })
        .collect()
}

/// Largest similarity between any accepted component and dimension `j`.
pub fn best_similarity(cs: &ComponentSet, truth: &SimGroundTruth, j: usize) -> Result<f64> {
    let dir = truth.direction(j);
    cs.accepted_gammas()
        .iter()
        .map(|g| metrics::projection_similarity(g, &dir))
        .try_fold(0.0f64, |m, s| s.map(|s| m.max(s)))
}

/// Everything scored in one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub dims: Vec<DimensionMatch>,
    /// `[dim]` scores for every method that ran.
    pub scores: BTreeMap<Method, Vec<ClusterScores>>,
    pub accepted: usize,
    pub dfd_trace: Vec<f64>,
}

fn baseline_labels(method: Method, d: &Dataset, truth: &SimGroundTruth, j: usize, k: usize, seed: u64, n_init: usize) -> Result<Vec<usize>> {
    match method {
        Method::KmeansLowTri => baselines::kmeans(&baselines::fisher_z_features(d)?, k, seed, n_init),
        Method::HierarchicalLowTri => baselines::hierarchical(&baselines::fisher_z_features(d)?, k),
        Method::KmeansLog => baselines::kmeans(&baselines::log_projected_features(d, &truth.direction(j))?, k, seed, n_init),
        Method::HierarchicalLog => baselines::hierarchical(&baselines::log_projected_features(d, &truth.direction(j))?, k),
        Method::Capclust => unreachable!("scored from the component fit"),
    }
}

fn one_based_to_zero(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|l| l.saturating_sub(1)).collect()
}

/// Simulation settings of replication `r`.
pub fn replication_sim(cfg: &StudyConfig, r: usize) -> SimConfig {
    let mut sim = cfg.sim.clone();
    sim.seed = rng::derive(cfg.seed, rng::tag::REPLICATION, r as u64);
    sim
}

/// Runs replication `r`: simulate with a derived seed, extract components,
/// score every method.
pub fn run_replication(cfg: &StudyConfig, r: usize) -> Result<ReplicationOutcome> {
    let sim = replication_sim(cfg, r);
    let (d, truth) = generate_dataset(&sim)?;
    let mut em = cfg.em.clone();
    em.seed = rng::derive(sim.seed, rng::tag::RESTART, 0);
    let mut scores = BTreeMap::new();
    let (dims, accepted, dfd_trace) = if cfg.methods.contains(&Method::Capclust) {
        let cs = extract_components(&d, cfg.k, cfg.max_components, &em)?;
        let dims = match_dimensions(&cs, &truth)?;
        let s = dims
            .iter()
            .zip(&truth.memberships)
            .map(|(m, t)| metrics::score_clustering(&m.labels, &one_based_to_zero(t)))
            .collect::<Result<Vec<_>>>()?;
        scores.insert(Method::Capclust, s);
        (dims, cs.accepted, cs.dfd_trace)
    } else {
        (Vec::new(), 0, Vec::new())
    };
    for &m in cfg.methods.iter().filter(|&&m| m != Method::Capclust) {
        let s = (0..truth.structured_dims.len())
            .map(|j| {
                let labels = baseline_labels(m, &d, &truth, j, cfg.k, em.seed, cfg.kmeans_init)?;
                metrics::score_clustering(&labels, &one_based_to_zero(&truth.memberships[j]))
            })
            .collect::<Result<Vec<_>>>()?;
        scores.insert(m, s);
    }
    Ok(ReplicationOutcome {
        replication: r,
        dims,
        scores,
        accepted,
        dfd_trace,
    })
}

/// One fitted coefficient next to its true value, clusters aligned by `β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientComparison {
    /// One-based true cluster.
    pub cluster: usize,
    pub coefficient: usize,
    pub estimate: f64,
    pub truth: f64,
}

/// Scores of a single fit against a simulation truth, per structured dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitEvaluation {
    pub dim: usize,
    pub component: usize,
    pub similarity: f64,
    pub scores: ClusterScores,
    pub coefficients: Vec<CoefficientComparison>,
}

pub fn evaluate_fit(cs: &ComponentSet, truth: &SimGroundTruth) -> Result<Vec<FitEvaluation>> {
    let dims = match_dimensions(cs, truth)?;
    dims.into_iter()
        .enumerate()
        .map(|(j, m)| {
            let est: Vec<DVector<f64>> = m.beta.iter().map(|b| DVector::from_vec(b.clone())).collect();
            let true_beta = truth.beta(j);
            let order = metrics::align_to_truth(&est, &true_beta)?;
            let coefficients = true_beta
                .iter()
                .enumerate()
                .flat_map(|(c, b)| {
                    let est = &est[order[c]];
                    b.iter().enumerate().map(move |(q, &t)| CoefficientComparison {
                        cluster: c + 1,
                        coefficient: q,
                        estimate: est[q],
                        truth: t,
                    })
                })
                .collect();
            Ok(FitEvaluation {
                dim: truth.structured_dims[j],
                component: m.component,
                similarity: m.similarity,
                scores: metrics::score_clustering(&m.labels, &one_based_to_zero(&truth.memberships[j]))?,
                coefficients,
            })
        })
        .collect()
}

/// Runs all replications sequentially (each fit is parallel internally);
/// failures are logged and returned separately.
pub fn run_study(cfg: &StudyConfig) -> (Vec<ReplicationOutcome>, Vec<(usize, String)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in 0..cfg.replications {
        match run_replication(cfg, r) {
            Ok(o) => ok.push(o),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failed.push((r, e.to_string()));
            }
        }
    }
    (ok, failed)
}

/// Projection recovery and coefficient error for one structured dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationRow {
    pub dim: usize,
    pub similarity_mean: f64,
    pub similarity_se: f64,
    pub coefficients: Vec<metrics::CoefficientError>,
    pub replications: usize,
}

pub fn estimation_summary(outcomes: &[ReplicationOutcome], truth_beta: &[Vec<Vec<f64>>], dims: &[usize]) -> Result<Vec<EstimationRow>> {
    dims.iter()
        .enumerate()
        .map(|(j, &dim)| {
            let sims: Vec<f64> = outcomes.iter().map(|o| o.dims[j].similarity).collect();
            let (m, se) = metrics::mean_se(&sims);
            let est: Vec<Vec<DVector<f64>>> = outcomes
                .iter()
                .map(|o| o.dims[j].beta.iter().map(|b| DVector::from_vec(b.clone())).collect())
                .collect();
            let truth: Vec<DVector<f64>> = truth_beta[j].iter().map(|b| DVector::from_vec(b.clone())).collect();
            Ok(EstimationRow {
                dim,
                similarity_mean: m,
                similarity_se: se,
                coefficients: metrics::coefficient_bias_mse(&est, &truth)?,
                replications: outcomes.len(),
            })
        })
        .collect()
}

/// Mean clustering scores per method and dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRow {
    pub method: String,
    pub dim: usize,
    pub jaccard: f64,
    pub ari: f64,
    pub error: f64,
    pub replications: usize,
}

pub fn clustering_summary(outcomes: &[ReplicationOutcome], dims: &[usize], external: &BTreeMap<String, Vec<Vec<ClusterScores>>>) -> Vec<ClusteringRow> {
    let mut rows = Vec::new();
    let mut push = |method: String, per_rep: Vec<&Vec<ClusterScores>>| {
        for (j, &dim) in dims.iter().enumerate() {
            let pick = |f: fn(&ClusterScores) -> f64| metrics::mean_se(&per_rep.iter().map(|s| f(&s[j])).collect::<Vec<_>>()).0;
            rows.push(ClusteringRow {
                method: method.clone(),
                dim,
                jaccard: pick(|s| s.jaccard),
                ari: pick(|s| s.ari),
                error: pick(|s| s.error),
                replications: per_rep.len(),
            });
        }
    };
    for m in Method::ALL {
        let per_rep: Vec<&Vec<ClusterScores>> = outcomes.iter().filter_map(|o| o.scores.get(&m)).collect();
        if !per_rep.is_empty() {
            push(m.label().to_string(), per_rep);
        }
    }
    for (name, reps) in external {
        push(name.clone(), reps.iter().collect());
    }
    rows
}

/// Estimation CSV: one line per dimension, cluster and coefficient.
pub fn write_estimation_csv<W: std::io::Write>(rows: &[EstimationRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dim", "similarity_mean", "similarity_se", "cluster", "coefficient", "bias", "mse", "replications"])?;
    for r in rows {
        for c in &r.coefficients {
            let mut emit = |coef: String, bias: f64, mse: f64| {
                w.write_record([
                    format!("D{}", r.dim),
                    r.similarity_mean.to_string(),
                    r.similarity_se.to_string(),
                    c.cluster.to_string(),
                    coef,
                    bias.to_string(),
                    mse.to_string(),
                    r.replications.to_string(),
                ])
            };
            for (j, (b, m)) in c.bias.iter().zip(&c.mse).enumerate() {
                emit(format!("beta{j}"), *b, *m)?;
            }
            emit("mean".into(), c.mean_bias, c.mean_mse)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Clustering CSV: one line per method and dimension.
pub fn write_clustering_csv<W: std::io::Write>(rows: &[ClusteringRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "dim", "jaccard", "ari", "clus_error", "replications"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("D{}", r.dim),
            r.jaccard.to_string(),
            r.ari.to_string(),
            r.error.to_string(),
            r.replications.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
