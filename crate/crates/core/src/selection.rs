//! Cluster-count selection by BIC averaged over accepted components.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{extract_components, ComponentSet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{EmConfig, FitResult};

/// Free parameters `M = Kq1 + (K − 1)q2 + p`.
pub fn parameter_count(k: usize, q1: usize, q2: usize, p: usize) -> usize {
    k * q1 + (k - 1) * q2 + p
}

/// `M log(Σ T_i) − 2ℓ̂`.
pub fn bic(fit: &FitResult, d: &Dataset) -> f64 {
    let m = parameter_count(fit.params.k(), d.q1(), d.q2(), d.p());
    m as f64 * (d.total_observations() as f64).ln() - 2.0 * fit.loglik
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub k: usize,
    /// One-based component index.
    pub component: usize,
    pub parameters: usize,
    pub loglik: f64,
    pub bic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicReport {
    pub per_component: Vec<BicEntry>,
    /// Mean BIC over accepted components, keyed by `K`.
    pub average: BTreeMap<usize, f64>,
    pub chosen_k: usize,
    /// `(K, reason)` for candidates that produced no accepted component.
    pub skipped: Vec<(usize, String)>,
}

/// Per-component BIC of the accepted components of one extraction.
pub fn component_bics(cs: &ComponentSet, d: &Dataset) -> Vec<BicEntry> {
    cs.accepted_fits()
        .iter()
        .enumerate()
        .map(|(j, f)| BicEntry {
            k: f.params.k(),
            component: j + 1,
            parameters: parameter_count(f.params.k(), d.q1(), d.q2(), d.p()),
            loglik: f.loglik,
            bic: bic(f, d),
        })
        .collect()
}

/// Equal-weight mean; `None` when empty.
pub fn average_bic(entries: &[BicEntry]) -> Option<f64> {
    if entries.is_empty() {
        None
    } else {
        Some(entries.iter().map(|e| e.bic).sum::<f64>() / entries.len() as f64)
    }
}

/// Smallest `K` attaining the minimum average.
pub fn choose_k(average: &BTreeMap<usize, f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &v) in average {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Builds the report from already extracted component sets.
pub fn report_from_sets(sets: &[(usize, Result<ComponentSet>)], d: &Dataset) -> Result<BicReport> {
    let mut per_component = Vec::new();
    let mut average = BTreeMap::new();
    let mut skipped = Vec::new();
    for (k, outcome) in sets {
        match outcome {
            Ok(cs) => {
                let entries = component_bics(cs, d);
                match average_bic(&entries) {
                    Some(a) => {
                        average.insert(*k, a);
                    }
                    None => skipped.push((*k, "no accepted components".to_string())),
                }
                per_component.extend(entries);
            }
            Err(e) => {
                log::warn!("K = {k} skipped: {e}");
                skipped.push((*k, e.to_string()));
            }
        }
    }
    let chosen_k = choose_k(&average).ok_or_else(|| {
        Error::AllRestartsFailed(skipped.iter().map(|(k, r)| format!("K = {k}: {r}")).collect())
    })?;
    Ok(BicReport {
        per_component,
        average,
        chosen_k,
        skipped,
    })
}

/// Runs the component extraction for every `K` in `k_range` and picks the
/// `K` with the smallest average BIC (smaller `K` on ties).
pub fn select_num_clusters(
    d: &Dataset,
    k_range: std::ops::RangeInclusive<usize>,
    r_max: usize,
    cfg: &EmConfig,
) -> Result<BicReport> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi || hi > d.n() {
        return Err(Error::InvalidConfig(format!("K range {lo}..={hi} must lie within 1..={}", d.n())));
    }
    let ks: Vec<usize> = k_range.collect();
    let sets: Vec<(usize, Result<ComponentSet>)> = ks
        .par_iter()
        .map(|&k| (k, extract_components(d, k, r_max, cfg)))
        .collect();
    report_from_sets(&sets, d)
}
