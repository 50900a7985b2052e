//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the verdicts appear in `cargo test` output. A name given on
//! the command line restricts the run to criteria whose id contains it.

mod common;

use std::time::Instant;

use capclust::bootstrap::{bootstrap_with, BootstrapConfig, BootstrapReference};
use capclust::components::{dfd, extract_components};
use capclust::linalg::quad_form;
use capclust::metrics::{self, adjusted_rand_index, classification_error, jaccard_index};
use capclust::mixture::{
    beta_gradient, beta_objective, e_step, em_fit, gating_objective, observed_loglik, update_gamma,
};
use capclust::rng;
use capclust::selection::select_num_clusters;
use capclust::simgen::{generate_dataset, Eigenstructure, Misspecification, SimConfig};
use capclust::study::{clustering_summary, estimation_summary, run_study, Method, ReplicationOutcome, StudyConfig};
use capclust::EmConfig;
use nalgebra::DVector;
use rand::Rng;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn study(sim: SimConfig, replications: usize, max_components: usize, methods: Vec<Method>, seed: u64) -> (Vec<ReplicationOutcome>, usize) {
    let cfg = StudyConfig {
        sim,
        replications,
        k: 2,
        max_components,
        em: EmConfig::default(),
        methods,
        kmeans_init: 10,
        seed,
    };
    let (ok, failed) = run_study(&cfg);
    for (r, e) in &failed {
        eprintln!("  replication {r} failed: {e}");
    }
    (ok, failed.len())
}

fn mean(v: &[f64]) -> f64 {
    metrics::mean_se(v).0
}

fn projection_recovery(n500: &[ReplicationOutcome], failed: usize) -> Verdict {
    let d2 = mean(&n500.iter().map(|o| o.dims[0].similarity).collect::<Vec<_>>());
    let d4 = mean(&n500.iter().map(|o| o.dims[1].similarity).collect::<Vec<_>>());
    Verdict {
        id: "1 projection recovery",
        pass: n500.len() >= 50 && d2 >= 0.99 && d4 >= 0.95,
        detail: format!("n=500, {} replications ({failed} failed): D2 {d2:.4} (>= 0.99), D4 {d4:.4} (>= 0.95)", n500.len()),
    }
}

fn coefficient_consistency(n50: &[ReplicationOutcome], n500: &[ReplicationOutcome]) -> Verdict {
    let sim = SimConfig::two_dims(500, 0);
    let small = &estimation_summary(n50, &sim.beta_true, &sim.structured_dims).unwrap()[0];
    let large = &estimation_summary(n500, &sim.beta_true, &sim.structured_dims).unwrap()[0];
    let max_bias = large.coefficients.iter().flat_map(|c| &c.bias).fold(0.0f64, |m, b| m.max(b.abs()));
    let max_mse = large.coefficients.iter().flat_map(|c| &c.mse).fold(0.0f64, |m, v| m.max(*v));
    let abs_mean = |c: &metrics::CoefficientError| c.bias.iter().map(|b| b.abs()).sum::<f64>() / c.bias.len() as f64;
    let mut improves = true;
    let mut trend = Vec::new();
    for (s, l) in small.coefficients.iter().zip(&large.coefficients) {
        let bias_ok = abs_mean(l) < abs_mean(s);
        let mse_ok = l.mse.iter().zip(&s.mse).all(|(a, b)| a < b);
        improves &= bias_ok && mse_ok;
        trend.push(format!(
            "cluster {} mean|bias| {:.4}->{:.4}, mean MSE {:.4}->{:.4}",
            s.cluster,
            abs_mean(s),
            abs_mean(l),
            s.mean_mse,
            l.mean_mse
        ));
    }
    Verdict {
        id: "2 coefficient consistency",
        pass: max_bias <= 0.05 && max_mse <= 0.01 && improves,
        detail: format!(
            "D2 n=500 max|bias| {max_bias:.4} (<= 0.05), max MSE {max_mse:.5} (<= 0.01); n=50 ({} reps) -> n=500 ({} reps): {}",
            n50.len(),
            n500.len(),
            trend.join("; ")
        ),
    }
}

fn clustering_accuracy() -> Verdict {
    let sim = SimConfig::dim2_intercept_only(100, 0);
    let (ok, failed) = study(sim.clone(), 50, 2, Method::ALL.to_vec(), 3);
    let rows = clustering_summary(&ok, &sim.structured_dims, &Default::default());
    let get = |label: &str| rows.iter().find(|r| r.method == label).unwrap();
    let cap = get(Method::Capclust.label());
    let klog = get(Method::KmeansLog.label());
    let klow = get(Method::KmeansLowTri.label());
    Verdict {
        id: "3 clustering accuracy",
        pass: ok.len() >= 50 && cap.ari >= 0.85 && cap.jaccard >= 0.90 && cap.error <= 0.05 && cap.ari > klog.ari && klog.ari > klow.ari,
        detail: format!(
            "{} replications ({failed} failed): ARI {:.3} (>= 0.85), Jaccard {:.3} (>= 0.90), error {:.3} (<= 0.05); mean ARI CAPclust {:.3} > K-means(log) {:.3} > K-means(low.tri) {:.3}",
            ok.len(),
            cap.ari,
            cap.jaccard,
            cap.error,
            cap.ari,
            klog.ari,
            klow.ari
        ),
    }
}

fn cluster_count_selection() -> Verdict {
    let reps = 40;
    let mut hits = 0;
    let mut chosen = [0usize; 4];
    for r in 0..reps {
        let sim = SimConfig::two_dims(100, rng::derive(4, rng::tag::REPLICATION, r as u64));
        let (d, _) = generate_dataset(&sim).unwrap();
        let em = EmConfig {
            seed: rng::derive(sim.seed, rng::tag::SELECT, 0),
            ..EmConfig::default()
        };
        match select_num_clusters(&d, 1..=3, 2, &em) {
            Ok(report) => {
                chosen[report.chosen_k] += 1;
                hits += usize::from(report.chosen_k == 2);
            }
            Err(e) => eprintln!("  replication {r} failed: {e}"),
        }
    }
    let rate = hits as f64 / reps as f64;
    Verdict {
        id: "4 cluster-count selection",
        pass: rate >= 0.75,
        detail: format!("K=2 chosen in {hits}/{reps} = {rate:.3} (>= 0.75); K=1/2/3 chosen {}/{}/{}", chosen[1], chosen[2], chosen[3]),
    }
}

fn misspecification_robustness() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, m) in [("variance interaction", Misspecification::VarianceInteraction), ("both interactions", Misspecification::BothInteractions)] {
        let mut sim = SimConfig::two_dims(100, 0);
        sim.misspec = m;
        let (ok, failed) = study(sim, 50, 2, vec![Method::Capclust], 5);
        let d2 = mean(&ok.iter().map(|o| o.dims[0].similarity).collect::<Vec<_>>());
        pass &= ok.len() >= 50 && d2 >= 0.95;
        parts.push(format!("{name} D2 {d2:.4} over {} ({failed} failed)", ok.len()));
    }
    Verdict {
        id: "5 misspecification robustness",
        pass,
        detail: format!("{} (>= 0.95)", parts.join(", ")),
    }
}

fn partial_eigenstructure() -> Verdict {
    let mut sim = SimConfig::two_dims(100, 0);
    sim.eigenstructure = Eigenstructure::PartialCommon { shared: 3 };
    let (ok, failed) = study(sim, 50, 2, vec![Method::Capclust], 6);
    let d2 = mean(&ok.iter().map(|o| o.dims[0].similarity).collect::<Vec<_>>());
    let d4_max = ok.iter().map(|o| o.dims[1].similarity).fold(0.0f64, f64::max);
    Verdict {
        id: "6 partial common eigenstructure",
        pass: ok.len() >= 50 && d2 >= 0.95 && d4_max < 0.8,
        detail: format!("{} replications ({failed} failed): D2 {d2:.4} (>= 0.95), largest similarity to pi_4 {d4_max:.4} (< 0.8)", ok.len()),
    }
}

fn property_suite() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    // EM monotonicity on 100 fitted instances.
    let (mut fitted, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut seed = 0;
    while fitted < 100 && seed < 200 {
        let (d, init) = common::random_instance(1000 + seed, (10, 30), (2, 4), 12);
        seed += 1;
        match em_fit(&d, &init, &EmConfig::default()) {
            Ok(fit) => {
                fitted += 1;
                for w in fit.trace.windows(2) {
                    worst = worst.max((w[0] - w[1]) / w[0].abs().max(1.0));
                }
            }
            Err(_) => skipped += 1,
        }
    }
    let ok = fitted == 100 && worst <= 1e-8;
    pass &= ok;
    notes.push(format!("EM monotone on {fitted} instances ({skipped} skipped), worst relative drop {worst:.1e}"));

    // Generalized eigen residual on 100 random SPD pencils.
    let mut worst = 0.0f64;
    let mut r = common::rng(7);
    for _ in 0..100 {
        let p = r.random_range(2..=8);
        let a = common::random_spd(p, &mut r);
        let h = common::random_spd(p, &mut r);
        let (g, lambda) = update_gamma(&a, &h).unwrap();
        let res = (&a * &g - &h * &g * lambda).amax();
        worst = worst.max(res).max((quad_form(&h, &g) - 1.0).abs());
    }
    pass &= worst <= 1e-8;
    notes.push(format!("eigen residual {worst:.1e}"));

    // Gradients against central differences on 20 instances.
    let mut worst = 0.0f64;
    for s in 0..20 {
        let (d, params) = common::random_instance(2000 + s, (10, 30), (2, 4), 12);
        let resp = e_step(&d, &params).unwrap();
        for k in 0..2 {
            let g = beta_gradient(&resp, &d, &params.gamma, k, &params.beta[k]).unwrap();
            let f = |b: &DVector<f64>| beta_objective(&resp, &d, &params.gamma, k, b).unwrap();
            for j in 0..g.len() {
                let fd = common::central_difference(f, &params.beta[k], j, 1e-5);
                worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
            }
        }
        let (_, grad) = gating_objective(&resp, &d, &params.alpha).unwrap();
        let f = |a: &DVector<f64>| gating_objective(&resp, &d, &[params.alpha[0].clone(), a.clone()]).unwrap().0;
        for j in 0..grad.len() {
            let fd = common::central_difference(f, &params.alpha[1], j, 1e-5);
            worst = worst.max((fd - grad[j]).abs() / grad[j].abs().max(1.0));
        }
    }
    pass &= worst <= 1e-5;
    notes.push(format!("gradient rel. error {worst:.1e}"));

    // DfD on 100 random projection sets.
    let (d, _) = common::random_instance(3000, (20, 20), (6, 6), 30);
    let mut min_dfd = f64::INFINITY;
    let mut r1 = true;
    for _ in 0..100 {
        let k = r.random_range(2..=4);
        let gammas: Vec<DVector<f64>> = (0..k).map(|_| common::gaussian_vector(6, &mut r)).collect();
        min_dfd = min_dfd.min(dfd(&gammas, &d).unwrap());
        r1 &= dfd(&gammas[..1], &d).unwrap() == 1.0;
    }
    pass &= min_dfd >= 1.0 && r1;
    notes.push(format!("min DfD {min_dfd:.4}, r=1 exact {r1}"));

    // Orthogonality of extracted components.
    let mut worst = 0.0f64;
    for s in 0..5 {
        let sim = SimConfig {
            p: 6,
            ..SimConfig::two_dims(60, 4000 + s)
        };
        let (d, _) = generate_dataset(&sim).unwrap();
        let cfg = EmConfig {
            n_restarts: 3,
            dfd_threshold: f64::INFINITY,
            seed: s,
            ..EmConfig::default()
        };
        let cs = extract_components(&d, 2, 4, &cfg).unwrap();
        for i in 0..cs.gammas.len() {
            for j in 0..i {
                let c = cs.gammas[i].dot(&cs.gammas[j]) / (cs.gammas[i].norm() * cs.gammas[j].norm());
                worst = worst.max(c.abs());
            }
        }
    }
    pass &= worst <= 1e-6;
    notes.push(format!("max |cos| between components {worst:.1e}"));

    // Partition metrics against pair enumeration for n <= 8.
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(2..=8);
        let ka = r.random_range(1..=4);
        let kb = r.random_range(1..=4);
        let a: Vec<usize> = (0..n).map(|_| r.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| r.random_range(0..kb)).collect();
        worst = worst
            .max((adjusted_rand_index(&a, &b).unwrap() - common::brute_ari(&a, &b)).abs())
            .max((jaccard_index(&a, &b).unwrap() - common::brute_jaccard(&a, &b)).abs())
            .max((classification_error(&a, &b).unwrap() - common::brute_error(&a, &b)).abs());
    }
    pass &= worst <= 1e-12;
    notes.push(format!("metric oracle gap {worst:.1e}"));

    // Observed log-likelihood against full latent enumeration.
    let mut worst = 0.0f64;
    for s in 0..20 {
        let (d, params) = common::random_instance(5000 + s, (3, 3), (2, 4), 2);
        let got = observed_loglik(&d, &params).unwrap();
        worst = worst.max((got - common::brute_force_loglik(&d, &params)).abs());
    }
    pass &= worst <= 1e-8;
    notes.push(format!("loglik brute-force gap {worst:.1e}"));

    Verdict {
        id: "7 property suite",
        pass,
        detail: notes.join("; "),
    }
}

/// Interval hit for a true value, with the intercept moved to the
/// unit-norm projection scale.
fn beta_coverage(reps: usize, b: usize) -> (usize, usize, usize) {
    let (mut hit, mut total, mut failed) = (0, 0, 0);
    for r in 0..reps {
        let sim = SimConfig::two_dims(200, rng::derive(8, rng::tag::REPLICATION, r as u64));
        let (d, truth) = generate_dataset(&sim).unwrap();
        let em = EmConfig {
            seed: rng::derive(sim.seed, rng::tag::RESTART, 0),
            ..EmConfig::default()
        };
        let run = || -> capclust::Result<(usize, usize)> {
            let cs = extract_components(&d, 2, 2, &em)?;
            let cfg = BootstrapConfig {
                replicates: b,
                seed: rng::derive(sim.seed, rng::tag::BOOTSTRAP, 0),
                em: em.clone(),
                ..BootstrapConfig::default()
            };
            let report = bootstrap_with(&d, &cs, &cfg)?;
            let dims = capclust::study::match_dimensions(&cs, &truth)?;
            let (mut h, mut t) = (0, 0);
            for (j, m) in dims.iter().enumerate() {
                let shift = -2.0 * cs.fits[m.component - 1].params.gamma.norm().ln();
                let est: Vec<DVector<f64>> = m.beta.iter().map(|v| DVector::from_vec(v.clone())).collect();
                let truth_beta = truth.beta(j);
                let order = metrics::align_to_truth(&est, &truth_beta)?;
                for iv in report.intervals.iter().filter(|i| i.component == m.component && i.kind == "beta") {
                    let term: usize = iv.term.trim_start_matches('x').parse().unwrap();
                    let s = if term == 0 { shift } else { 0.0 };
                    let true_cluster = order.iter().position(|&e| e == iv.cluster - 1).unwrap();
                    let v = truth_beta[true_cluster][term];
                    t += 1;
                    h += usize::from(iv.lower + s <= v && v <= iv.upper + s);
                }
            }
            Ok((h, t))
        };
        match run() {
            Ok((h, t)) => {
                hit += h;
                total += t;
            }
            Err(e) => {
                failed += 1;
                eprintln!("  coverage replication {r} failed: {e}");
            }
        }
    }
    (hit, total, failed)
}

fn bootstrap_sanity() -> Verdict {
    let (d, _) = generate_dataset(&SimConfig::two_dims(100, 81)).unwrap();
    let em = EmConfig {
        seed: 81,
        ..EmConfig::default()
    };
    let cs = extract_components(&d, 2, 2, &em).unwrap();
    let reference = BootstrapReference::new(&d, &cs, &em).unwrap();
    let identity: Vec<usize> = (0..d.n()).collect();
    let mut worst = 0.0f64;
    for (rep, est) in reference.replicate(&identity, 0, &mut common::rng(0)).iter().zip(reference.estimates()) {
        let rep = rep.as_ref().unwrap();
        for (a, b) in rep.beta.iter().zip(&est.beta).chain(rep.alpha.iter().zip(&est.alpha)) {
            worst = worst.max((a - b).amax());
        }
    }
    let (hit, total, failed) = beta_coverage(50, 100);
    let coverage = hit as f64 / total.max(1) as f64;
    Verdict {
        id: "8 bootstrap sanity",
        pass: worst <= 1e-8 && (0.85..=1.0).contains(&coverage) && failed == 0,
        detail: format!("identity replicate max gap {worst:.1e} (<= 1e-8); 95% coverage {hit}/{total} = {coverage:.3} in [0.85, 1.00] over 50 replications ({failed} failed), n=200, B=100"),
    }
}

fn pipeline_shape() -> Verdict {
    let sim = SimConfig {
        p: 75,
        t: 134,
        ..SimConfig::two_dims(162, 9)
    };
    let (d, _) = generate_dataset(&sim).unwrap();
    let em = EmConfig {
        seed: 9,
        ..EmConfig::default()
    };
    let cs = extract_components(&d, 2, 3, &em).unwrap();
    let report = bootstrap_with(
        &d,
        &cs,
        &BootstrapConfig {
            replicates: 100,
            seed: 9,
            em: em.clone(),
            ..BootstrapConfig::default()
        },
    )
    .unwrap();
    let json: serde_json::Value = serde_json::to_value(&cs).unwrap();
    let mut problems = Vec::new();
    for key in ["gammas", "fits", "dfd_trace", "accepted", "k"] {
        if json.get(key).is_none() {
            problems.push(format!("component set lacks {key}"));
        }
    }
    if cs.gammas.len() != 3 || cs.gammas.iter().any(|g| g.len() != 75) {
        problems.push(format!("{} components attempted", cs.gammas.len()));
    }
    if cs.fits.iter().any(|f| f.labels.len() != 162 || f.resp.eta.shape() != (162, 2)) {
        problems.push("label or responsibility shape".into());
    }
    // beta (2 per cluster) and alpha (2 for cluster 2) per accepted component.
    let expected = cs.accepted * (2 * 3 + 2);
    if report.intervals.len() != expected {
        problems.push(format!("{} intervals, expected {expected}", report.intervals.len()));
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let header = String::from_utf8(csv).unwrap().lines().next().unwrap_or_default().to_string();
    if header != "component,cluster,kind,term,estimate,lower,upper" {
        problems.push(format!("bootstrap CSV header {header}"));
    }
    if report.intervals.iter().any(|i| i.lower > i.upper || i.lower.is_nan() || !i.estimate.is_finite()) {
        problems.push("malformed interval".into());
    }
    Verdict {
        id: "pipeline shape (p=75, n=162, T=134)",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("3 components attempted, {} accepted, DfD {:?}, {} intervals, B={}", cs.accepted, cs.dfd_trace, report.intervals.len(), report.b)
        } else {
            problems.join("; ")
        },
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| id.contains(f.as_str()));
    let started = Instant::now();
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict, t: Instant| {
        println!("{} criterion {}: {} [{:.0?}]", if v.pass { "PASS" } else { "FAIL" }, v.id, v.detail, t.elapsed());
        verdicts.push(v);
    };

    if wanted("1 projection") || wanted("2 coefficient") {
        let t = Instant::now();
        let sim = |n| SimConfig::two_dims(n, 0);
        let (n500, failed) = study(sim(500), 50, 2, vec![Method::Capclust], 1);
        if wanted("1 projection") {
            record(projection_recovery(&n500, failed), t);
        }
        if wanted("2 coefficient") {
            let t = Instant::now();
            // The n=50 arm uses 200 replications so its Monte-Carlo error
            // does not swamp small biases.
            let (n50, _) = study(sim(50), 200, 2, vec![Method::Capclust], 2);
            record(coefficient_consistency(&n50, &n500), t);
        }
    }
    let rest: [Criterion; 7] = [
        ("3 clustering", clustering_accuracy),
        ("4 cluster-count", cluster_count_selection),
        ("5 misspecification", misspecification_robustness),
        ("6 partial", partial_eigenstructure),
        ("7 property", property_suite),
        ("8 bootstrap", bootstrap_sanity),
        ("pipeline shape", pipeline_shape),
    ];
    for (key, f) in rest {
        if wanted(key) {
            let t = Instant::now();
            record(f(), t);
        }
    }

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0?}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        started.elapsed()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
