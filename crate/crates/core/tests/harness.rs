use std::path::Path;

use proxskip::harness::{
    config_hash_of_text, emit_plot_data, load_config, load_manifest, load_records, parse_plot_data, run_experiment,
    Axis, ExperimentConfig,
};
use proxskip::problems::{write_libsvm, Dataset, LogisticProblem};
use proxskip::record::RunStatus;
use proxskip::Error;

fn run(text: &str, dir: &Path, jobs: usize) -> proxskip::harness::Manifest {
    let cfg = ExperimentConfig::from_json_str(text, None).unwrap();
    run_experiment(&cfg, dir, jobs, &config_hash_of_text(text).unwrap()).unwrap()
}

const MIXED: &str = r#"{
    "problem": {"kind": "quadratic", "dim": 5, "kappa": 30, "clients": 3, "seed": 9},
    "topology": {"kind": "complete", "n": 3},
    "methods": ["gd", "proxskip", "scaffnew", "local-gd", "scaffold", "decentralized-scaffnew",
                {"name": "sproxskip", "oracle": {"kind": "gaussian", "sigma": 0.1}, "epsilon": 0.05}],
    "iterations": 300,
    "seeds": [4, 5],
    "log_every": 7
}"#;

#[test]
fn outputs_are_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(MIXED, &tmp.path().join("a"), 1);
    let b = run(MIXED, &tmp.path().join("b"), 3);
    assert_eq!(a.runs.len(), 14);
    assert_eq!(a.config_hash, b.config_hash);
    for r in &a.runs {
        let x = std::fs::read(tmp.path().join("a").join(&r.file)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(&r.file)).unwrap();
        assert_eq!(x, y, "{}", r.file);
    }
}

#[test]
fn manifest_records_resolved_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run(MIXED, tmp.path(), 1);
    let reloaded = load_manifest(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded.runs.len(), m.runs.len());
    let local = m.runs.iter().find(|r| r.params.label == "local-gd").unwrap();
    let steps = local.params.tau.unwrap();
    assert_eq!(local.params.iterations % steps as u64, 0);
    assert!((local.params.gamma * steps * m.problem.client_l - 1.0).abs() < 1e-12);
    let dec = m
        .runs
        .iter()
        .find(|r| r.params.label == "decentralized-scaffnew")
        .unwrap();
    let (g, p, tau) = (dec.params.gamma, dec.params.p.unwrap(), dec.params.tau.unwrap());
    assert!((g * tau / p - 1.0).abs() < 1e-12);
    assert!(m.problem.delta.is_some());
    for r in &m.runs {
        assert!(tmp.path().join(&r.file).exists());
        assert!(r.wall_clock_seconds >= 0.0);
    }
}

#[test]
fn divergent_run_is_flagged_and_siblings_finish() {
    let text = r#"{
        "problem": {"kind": "quadratic", "dim": 4, "kappa": 10, "clients": 2},
        "methods": [{"name": "gd", "stepsize": 100.0}, "scaffnew"],
        "iterations": 2000,
        "seeds": [0]
    }"#;
    let tmp = tempfile::tempdir().unwrap();
    let m = run(text, tmp.path(), 2);
    assert_eq!(m.runs[0].status, RunStatus::Diverged);
    assert_eq!(m.runs[1].status, RunStatus::Completed);
    assert!(m.runs[1].final_dist_sq.unwrap() < 1e-10);
}

#[test]
fn scaffnew_needs_fewer_rounds_than_gd() {
    let text = r#"{
        "problem": {"kind": "quadratic", "dim": 6, "kappa": 10000, "clients": 4, "seed": 1},
        "methods": ["gd", "scaffnew"],
        "seeds": [0],
        "log_every": 1000
    }"#;
    let tmp = tempfile::tempdir().unwrap();
    let m = run(text, tmp.path(), 1);
    assert!(m.runs.iter().all(|r| r.status == RunStatus::ReachedTarget));
    assert!(m.runs[1].comm_rounds < m.runs[0].comm_rounds);
}

#[test]
fn probability_grid_prefers_inverse_sqrt_kappa() {
    let text = r#"{
        "problem": {"kind": "skewed-quadratic", "dim": 4, "kappa": 90000, "clients": 4, "seed": 3},
        "methods": [{"name": "scaffnew", "stepsize": 1.0}],
        "p": [0.01, 0.0033333333333333335, 0.001],
        "comm_budget": 1500,
        "iterations": 5000000,
        "seeds": [0, 1, 2],
        "log_every": 100000
    }"#;
    let tmp = tempfile::tempdir().unwrap();
    let m = run(text, tmp.path(), 1);
    let median = |label: &str| {
        let mut v: Vec<f64> = m
            .runs
            .iter()
            .filter(|r| r.params.label == label)
            .map(|r| r.final_dist_sq.unwrap())
            .collect();
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let best = median("scaffnew-p0.0033333333333333335");
    assert!(best <= median("scaffnew-p0.01"));
    assert!(best <= median("scaffnew-p0.001"));
}

#[test]
fn plot_data_round_trips_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    run(MIXED, tmp.path(), 1);
    let records = load_records(&tmp.path().join("manifest.json")).unwrap();
    let text = emit_plot_data(&records, Axis::Iter).unwrap();
    let points = parse_plot_data(&text).unwrap();
    let expected: usize = records.iter().map(|r| r.rows.len()).sum();
    assert_eq!(points.len(), expected);
    let mut k = 0;
    for rec in &records {
        for row in &rec.rows {
            let pt = &points[k];
            assert_eq!(
                (pt.method.as_str(), pt.seed, pt.x),
                (rec.method.as_str(), rec.seed, row.t)
            );
            assert_eq!(pt.y, row.dist_sq.unwrap().max(1e-30));
            k += 1;
        }
    }
    let comm = parse_plot_data(&emit_plot_data(&records, Axis::Comm).unwrap()).unwrap();
    for w in comm.windows(2) {
        if w[0].method == w[1].method && w[0].seed == w[1].seed {
            assert!(w[0].x < w[1].x);
        }
    }
}

#[test]
fn config_files_report_problems_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"problem": {"kind": "quadratic", "dim": 3, "kappa": 5, "shape": 1}, "methods": ["gd"]}"#,
    )
    .unwrap();
    let err = load_config(&path).unwrap_err();
    assert!(
        matches!(&err, Error::Config { path, .. } if path.starts_with("problem")),
        "{err}"
    );
    assert!(err.to_string().contains("shape"));
    assert!(matches!(
        load_config(&tmp.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
    std::fs::write(&path, "{").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config { .. })));
}

#[test]
fn libsvm_problem_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, labels) = LogisticProblem::synthetic(60, 5, 0.1, 2).unwrap();
    std::fs::write(tmp.path().join("tiny.libsvm"), write_libsvm(&Dataset { data, labels })).unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"problem": {"kind": "libsvm", "path": "tiny.libsvm", "max_samples": 40, "max_features": 4},
            "split": {"clients": 4, "mode": "round-robin"},
            "methods": ["scaffnew"], "seeds": [0], "iterations": 200}"#,
    )
    .unwrap();
    let (cfg, hash) = load_config(&cfg_path).unwrap();
    let m = run_experiment(&cfg, &tmp.path().join("out"), 1, &hash).unwrap();
    assert_eq!((m.problem.samples, m.problem.dim, m.problem.clients), (40, 4, 4));
}
