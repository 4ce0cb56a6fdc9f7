//! A JSON-configured experiment from code: run, then turn the manifest
//! into plot data on the communication axis.

use proxskip::harness::{config_hash_of_text, emit_plot_data, load_records, run_experiment, Axis, ExperimentConfig};

const CONFIG: &str = r#"{
    "problem": {"kind": "quadratic", "dim": 10, "kappa": 1000, "clients": 5, "seed": 2},
    "methods": ["gd", "scaffnew", {"name": "scaffold", "stepsize": "tuned"}],
    "target": 1e-6,
    "seeds": [0, 1, 2],
    "log_every": 50
}"#;

fn main() -> proxskip::Result<()> {
    let cfg = ExperimentConfig::from_json_str(CONFIG, None)?;
    let out = std::env::temp_dir().join("proxskip-example");
    let manifest = run_experiment(&cfg, &out, 2, &config_hash_of_text(CONFIG)?)?;
    for r in &manifest.runs {
        println!(
            "{:<10} seed {} gamma {:.3e} p {:?} -> {:?} after {} rounds",
            r.params.label, r.params.seed, r.params.gamma, r.params.p, r.status, r.comm_rounds
        );
    }
    let plot = emit_plot_data(&load_records(&out.join("manifest.json"))?, Axis::Comm)?;
    println!("{} plot rows written under {}", plot.lines().count() - 1, out.display());
    Ok(())
}
