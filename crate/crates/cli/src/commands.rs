use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use capclust::bootstrap::{bootstrap_with, BootstrapConfig, Contrast};
use capclust::components::{extract_components, ComponentSet};
use capclust::dataset::{center_scale, load_dataset, write_covariates, write_timeseries};
use capclust::metrics::{self, ClusterScores};
use capclust::selection::select_num_clusters;
use capclust::simgen::{generate_dataset, SimConfig, SimGroundTruth};
use capclust::study::{
    clustering_summary, estimation_summary, evaluate_fit, replication_sim, run_study, write_clustering_csv,
    write_estimation_csv, Method, StudyConfig,
};
use capclust::{Dataset, EmConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::output::{OutputDir, Recorder};
use crate::{BenchmarkArgs, BootstrapArgs, DataArgs, EmArgs, EvaluateArgs, FitArgs, SelectArgs, SimulateArgs};

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Core errors carry their variant name so scripts can match on it.
fn domain(e: capclust::Error) -> anyhow::Error {
    anyhow!("{}: {e}", e.code())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))
}

/// Runs `body` against a fresh output directory; on failure every file it
/// wrote is removed.
fn with_output(dir: &Path, command: &str, body: impl FnOnce(&mut OutputDir, &mut Recorder) -> Result<()>) -> Result<()> {
    let mut out = OutputDir::create(dir)?;
    let mut rec = Recorder::new(command);
    match body(&mut out, &mut rec).and_then(|()| rec.finish(&mut out)) {
        Ok(()) => Ok(()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn load(args: &DataArgs, rec: &mut Recorder) -> Result<Dataset> {
    let d = load_dataset(&args.data, &args.covariates).map_err(domain)?;
    rec.input(&args.data)?;
    rec.input(&args.covariates)?;
    let d = if args.center || args.scale {
        center_scale(&d, args.scale).map_err(domain)?
    } else {
        d
    };
    rec.stage("load");
    Ok(d)
}

fn apply_em(cfg: &mut EmConfig, a: &EmArgs) -> Result<()> {
    if let Some(v) = a.restarts {
        cfg.n_restarts = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.dfd_threshold {
        cfg.dfd_threshold = v;
    }
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    if let Some(v) = a.max_iter {
        cfg.max_iter = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn em_config(a: &EmArgs) -> Result<EmConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => EmConfig::default(),
    };
    apply_em(&mut cfg, a)?;
    Ok(cfg)
}

fn write_dfd(cs: &ComponentSet, w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["component", "dfd", "accepted"])?;
    for (r, v) in cs.dfd_trace.iter().enumerate() {
        w.write_record([(r + 1).to_string(), v.to_string(), (r < cs.accepted).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_labels(cs: &ComponentSet, d: &Dataset, w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["subject", "component", "cluster", "max_responsibility"])?;
    for (r, fit) in cs.accepted_fits().iter().enumerate() {
        for (i, s) in d.subjects().iter().enumerate() {
            let c = fit.labels[i];
            w.write_record([s.id.clone(), (r + 1).to_string(), (c + 1).to_string(), fit.resp.eta[(i, c)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_loadings(cs: &ComponentSet, w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["component", "variable", "loading"])?;
    for (r, g) in cs.accepted_gammas().iter().enumerate() {
        for (j, v) in g.iter().enumerate() {
            w.write_record([(r + 1).to_string(), (j + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_fit(out: &mut OutputDir, cs: &ComponentSet, d: &Dataset) -> Result<()> {
    out.json("components.json", cs)?;
    write_dfd(cs, out.writer("dfd.csv")?)?;
    write_labels(cs, d, out.writer("labels.csv")?)?;
    write_loadings(cs, out.writer("loadings.csv")?)
}

#[derive(Serialize)]
struct FitEcho<'a> {
    k: usize,
    max_components: usize,
    center: bool,
    scale: bool,
    em: &'a EmConfig,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    with_output(&a.out, "simulate", |out, rec| {
        let mut cfg = match &a.config {
            Some(p) => {
                rec.input(p)?;
                read_json(p)?
            }
            None => match a.preset.as_str() {
                "two-dims-intercept" => SimConfig::two_dims_intercept_only(100, 0),
                "dim2" => SimConfig::dim2(100, 0),
                "dim2-intercept" => SimConfig::dim2_intercept_only(100, 0),
                _ => SimConfig::two_dims(100, 0),
            },
        };
        if let Some(v) = a.n {
            cfg.n = v;
        }
        if let Some(v) = a.p {
            cfg.p = v;
        }
        if let Some(v) = a.t {
            cfg.t = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        rec.config(cfg.seed, &cfg)?;
        let (d, truth) = generate_dataset(&cfg).map_err(domain)?;
        rec.stage("generate");
        write_timeseries(&d, &out.path("timeseries.ndjson")).map_err(domain)?;
        write_covariates(&d, &out.path("covariates.csv")).map_err(domain)?;
        out.json("truth.json", &truth)?;
        rec.stage("write");
        Ok(())
    })
}

pub fn fit(a: FitArgs) -> Result<()> {
    let em = em_config(&a.em)?;
    with_output(&a.out, "fit", |out, rec| {
        if let Some(p) = &a.em.config {
            rec.input(p)?;
        }
        rec.config(
            em.seed,
            &FitEcho {
                k: a.k,
                max_components: a.max_components,
                center: a.data.center,
                scale: a.data.scale,
                em: &em,
            },
        )?;
        let d = load(&a.data, rec)?;
        let cs = extract_components(&d, a.k, a.max_components, &em).map_err(domain)?;
        rec.stage("extract_components");
        if let Some(f) = &cs.failure {
            log::warn!("component extraction stopped early: {f}");
        }
        write_fit(out, &cs, &d)?;
        rec.stage("write");
        Ok(())
    })
}

pub fn select(a: SelectArgs) -> Result<()> {
    let em = em_config(&a.em)?;
    if a.k_min == 0 || a.k_min > a.k_max {
        return Err(usage(format!("need 1 <= --k-min <= --k-max, got {} and {}", a.k_min, a.k_max)));
    }
    with_output(&a.out, "select", |out, rec| {
        if let Some(p) = &a.em.config {
            rec.input(p)?;
        }
        #[derive(Serialize)]
        struct Echo<'a> {
            k_min: usize,
            k_max: usize,
            max_components: usize,
            center: bool,
            scale: bool,
            em: &'a EmConfig,
        }
        rec.config(
            em.seed,
            &Echo {
                k_min: a.k_min,
                k_max: a.k_max,
                max_components: a.max_components,
                center: a.data.center,
                scale: a.data.scale,
                em: &em,
            },
        )?;
        let d = load(&a.data, rec)?;
        let report = select_num_clusters(&d, a.k_min..=a.k_max, a.max_components, &em).map_err(domain)?;
        rec.stage("select");
        for (k, reason) in &report.skipped {
            log::warn!("K = {k} skipped: {reason}");
        }
        out.json("bic.json", &report)?;
        let mut w = csv::Writer::from_writer(out.writer("bic.csv")?);
        w.write_record(["k", "component", "bic"])?;
        for e in &report.per_component {
            w.write_record([e.k.to_string(), e.component.to_string(), e.bic.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn parse_contrast(s: &str) -> Result<Contrast> {
    let (name, weights) = s.split_once('=').ok_or_else(|| usage(format!("contrast {s:?} is not name=c0,c1,...")))?;
    let weights = weights
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("contrast {name}: {e}")))?;
    Ok(Contrast {
        name: name.to_string(),
        weights,
    })
}

pub fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let mut cfg: BootstrapConfig = match &a.em.config {
        Some(p) => read_json(p)?,
        None => BootstrapConfig::default(),
    };
    apply_em(&mut cfg.em, &a.em)?;
    cfg.replicates = a.b;
    cfg.level = a.level;
    cfg.restarts_per_replicate = a.restarts_per_replicate;
    if let Some(s) = a.em.seed {
        cfg.seed = s;
    }
    for c in &a.contrasts {
        cfg.contrasts.push(parse_contrast(c)?);
    }
    if cfg.replicates < 2 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(usage("need --B >= 2 and 0 < --level < 1"));
    }
    with_output(&a.out, "bootstrap", |out, rec| {
        if let Some(p) = &a.em.config {
            rec.input(p)?;
        }
        rec.config(cfg.seed, &cfg)?;
        let d = load(&a.data, rec)?;
        if cfg.x_names.is_empty() {
            cfg.x_names = (0..d.q1()).map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") }).collect();
        }
        if cfg.w_names.is_empty() {
            cfg.w_names = (0..d.q2()).map(|j| if j == 0 { "intercept".into() } else { format!("w{j}") }).collect();
        }
        let cs = match &a.components {
            Some(p) => {
                rec.input(p)?;
                read_json(p)?
            }
            None => {
                let cs = extract_components(&d, a.k, a.max_components, &cfg.em).map_err(domain)?;
                rec.stage("extract_components");
                write_fit(out, &cs, &d)?;
                cs
            }
        };
        let report = bootstrap_with(&d, &cs, &cfg).map_err(domain)?;
        rec.stage("bootstrap");
        out.json("bootstrap.json", &report)?;
        report.write_csv(out.writer("bootstrap.csv")?)?;
        Ok(())
    })
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    with_output(&a.out, "evaluate", |out, rec| {
        let cs: ComponentSet = read_json(&a.components)?;
        let truth: SimGroundTruth = read_json(&a.truth)?;
        rec.input(&a.components)?;
        rec.input(&a.truth)?;
        let eval = evaluate_fit(&cs, &truth).map_err(domain)?;
        rec.stage("evaluate");
        out.json("evaluation.json", &eval)?;
        let mut w = csv::Writer::from_writer(out.writer("evaluation.csv")?);
        w.write_record(["dim", "component", "similarity", "jaccard", "ari", "clus_error"])?;
        for e in &eval {
            w.write_record([
                format!("D{}", e.dim),
                e.component.to_string(),
                e.similarity.to_string(),
                e.scores.jaccard.to_string(),
                e.scores.ari.to_string(),
                e.scores.error.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(out.writer("coefficients.csv")?);
        w.write_record(["dim", "cluster", "coefficient", "estimate", "truth", "bias"])?;
        for e in &eval {
            for c in &e.coefficients {
                w.write_record([
                    format!("D{}", e.dim),
                    c.cluster.to_string(),
                    format!("beta{}", c.coefficient),
                    c.estimate.to_string(),
                    c.truth.to_string(),
                    (c.estimate - c.truth).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

/// `replication -> dim -> subject id -> zero-based cluster`.
type ExternalLabels = BTreeMap<usize, BTreeMap<usize, BTreeMap<String, usize>>>;

fn read_external(path: &Path) -> Result<ExternalLabels> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e: csv::Error| usage(format!("reading {}: {e}", path.display())))?;
    let mut out = ExternalLabels::new();
    for (line, rec) in r.deserialize::<(usize, String, String, usize)>().enumerate() {
        let (rep, dim, subject, cluster) = rec.with_context(|| format!("{} line {}", path.display(), line + 2))?;
        let dim: usize = dim.trim_start_matches('D').parse().with_context(|| format!("dimension {dim:?}"))?;
        out.entry(rep).or_default().entry(dim).or_default().insert(subject, cluster);
    }
    Ok(out)
}

fn score_external(name: &str, labels: &ExternalLabels, cfg: &StudyConfig, reps: &[usize]) -> Result<Vec<Vec<ClusterScores>>> {
    reps.iter()
        .map(|&r| {
            let (d, truth) = generate_dataset(&replication_sim(cfg, r)).map_err(domain)?;
            truth
                .structured_dims
                .iter()
                .enumerate()
                .map(|(j, dim)| {
                    let by_id = labels
                        .get(&r)
                        .and_then(|m| m.get(dim))
                        .ok_or_else(|| anyhow!("{name}: no labels for replication {r}, D{dim}"))?;
                    let est = d
                        .subjects()
                        .iter()
                        .map(|s| by_id.get(&s.id).copied().ok_or_else(|| anyhow!("{name}: replication {r} lacks subject {}", s.id)))
                        .collect::<Result<Vec<_>>>()?;
                    let t: Vec<usize> = truth.memberships[j].iter().map(|l| l - 1).collect();
                    metrics::score_clustering(&est, &t).map_err(domain)
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct BenchmarkSummary<'a> {
    replications: usize,
    succeeded: usize,
    failed: &'a [(usize, String)],
}

pub fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut cfg: StudyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => StudyConfig::default(),
    };
    if let Some(v) = a.replications {
        cfg.replications = v;
    }
    if let Some(v) = a.n {
        cfg.sim.n = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.max_components {
        cfg.max_components = v;
    }
    if let Some(v) = a.restarts {
        cfg.em.n_restarts = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if !a.methods.is_empty() {
        cfg.methods = a
            .methods
            .iter()
            .map(|m| Method::parse(m).ok_or_else(|| usage(format!("unknown method {m:?}"))))
            .collect::<Result<_>>()?;
    }
    cfg.sim.validate().map_err(|e| usage(e.to_string()))?;
    cfg.em.validate().map_err(|e| usage(e.to_string()))?;
    let mut external = Vec::new();
    for entry in &a.external_labels {
        let (name, path) = entry.split_once('=').ok_or_else(|| usage(format!("--external-labels {entry:?} is not name=path")))?;
        external.push((name.to_string(), Path::new(path).to_path_buf()));
    }
    with_output(&a.out, "benchmark", |out, rec| {
        if let Some(p) = &a.config {
            rec.input(p)?;
        }
        rec.config(cfg.seed, &cfg)?;
        let (ok, failed) = run_study(&cfg);
        rec.stage("replications");
        if ok.is_empty() {
            bail!("all {} replications failed", cfg.replications);
        }
        let reps: Vec<usize> = ok.iter().map(|o| o.replication).collect();
        let mut scored = BTreeMap::new();
        for (name, path) in &external {
            rec.input(path)?;
            let labels = read_external(path)?;
            scored.insert(name.clone(), score_external(name, &labels, &cfg, &reps)?);
        }
        let dims = &cfg.sim.structured_dims;
        if cfg.methods.contains(&Method::Capclust) {
            let est = estimation_summary(&ok, &cfg.sim.beta_true, dims).map_err(domain)?;
            write_estimation_csv(&est, out.writer("estimation.csv")?)?;
        }
        write_clustering_csv(&clustering_summary(&ok, dims, &scored), out.writer("clustering.csv")?)?;
        out.json(
            "summary.json",
            &BenchmarkSummary {
                replications: cfg.replications,
                succeeded: ok.len(),
                failed: &failed,
            },
        )?;
        rec.stage("summaries");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrasts_parse() {
        let c = parse_contrast("diff=0, 1,-1").unwrap();
        assert_eq!(c.name, "diff");
        assert_eq!(c.weights, [0.0, 1.0, -1.0]);
        assert!(parse_contrast("nope").unwrap_err().downcast_ref::<UsageError>().is_some());
        assert!(parse_contrast("a=1,x").is_err());
    }

    #[test]
    fn domain_errors_name_their_variant() {
        let e = domain(capclust::Error::MissingCovariates("s1".into()));
        assert!(e.to_string().starts_with("MissingCovariates: "));
        assert!(e.downcast_ref::<UsageError>().is_none());
    }
}
