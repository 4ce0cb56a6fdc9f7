use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_proxskip"))
}

#[test]
fn run_then_plotdata() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"problem": {"kind": "quadratic", "dim": 3, "kappa": 10, "clients": 2},
            "methods": ["gd", "scaffnew"], "seeds": [1], "iterations": 100}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--jobs", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("manifest.json").exists());
    assert!(out.join("scaffnew-seed1.csv").exists());
    let plot = bin()
        .arg("plotdata")
        .arg(out.join("manifest.json"))
        .args(["--axis", "comm"])
        .output()
        .unwrap();
    assert!(plot.status.success());
    let text = String::from_utf8(plot.stdout).unwrap();
    assert!(text.starts_with("method,seed,x,y\n"));
    assert!(text.contains("scaffnew,1,"));
}

#[test]
fn errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"problem": {"kind": "quadratic", "dim": 3, "kappa": 10}, "methods": ["gd"], "foo": 1}"#,
    )
    .unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
}

#[test]
fn verify_single_check() {
    let out = bin().args(["verify", "--only", "3"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("[PASS]"));
}
