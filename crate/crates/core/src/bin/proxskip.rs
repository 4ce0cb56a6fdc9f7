use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use proxskip::harness::{
    emit_plot_data, load_config, load_records, tune_stepsize, Axis, ExperimentContext, Stepsize, StepsizeMode,
};
use proxskip::verify;

#[derive(Parser)]
#[command(version, about = "Prox-skipping solvers and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSVs plus manifest.json.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Grid-search the stepsize of every method in a config.
    Tune { config: PathBuf },
    /// Emit long-format plot data for the runs in a manifest.
    Plotdata {
        manifest: PathBuf,
        #[arg(long, default_value = "comm")]
        axis: String,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in self-checks.
    Verify {
        /// Run only this check.
        #[arg(long)]
        only: Option<usize>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> proxskip::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, jobs } => {
            let (cfg, hash) = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let manifest = proxskip::harness::run_experiment(&cfg, &out, jobs, &hash)?;
            for r in &manifest.runs {
                println!(
                    "{:<32} seed {:<3} {:?} t={} rounds={} dist_sq={}",
                    r.params.label,
                    r.params.seed,
                    r.status,
                    r.final_t,
                    r.comm_rounds,
                    r.final_dist_sq.map_or("-".into(), |d| format!("{d:.3e}"))
                );
            }
            println!("wrote {}", out.join("manifest.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune { config } => {
            let (cfg, _) = load_config(&config)?;
            let ctx = ExperimentContext::build(&cfg)?;
            let budget = cfg.comm_budget.unwrap_or(cfg.tuning.budget);
            for method in &cfg.methods {
                let ps: Vec<Option<f64>> = match &cfg.p {
                    Some(grid) if method.p.is_none() => grid.iter().copied().map(Some).collect(),
                    _ => vec![method.p],
                };
                for p in ps {
                    let mut m = method.clone();
                    m.stepsize = Stepsize::Mode(StepsizeMode::Tuned);
                    let label = match p {
                        Some(p) => format!("{} (p = {p})", m.name.name()),
                        None => m.name.name().to_string(),
                    };
                    match tune_stepsize(&ctx, &cfg, &m, p, budget, &cfg.tuning.grid) {
                        Ok((best, table)) => {
                            println!("{label}: best gamma {best:.6e} at {budget} rounds");
                            for (g, e) in table {
                                println!("  gamma {g:.6e}  error {e:.3e}");
                            }
                        }
                        Err(e) => println!("{label}: {e}"),
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plotdata { manifest, axis, out } => {
            let axis: Axis = axis.parse()?;
            let records = load_records(&manifest)?;
            let text = emit_plot_data(&records, axis)?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| proxskip::Error::Io {
                    context: path.display().to_string(),
                    source: e,
                })?,
                None => {
                    use std::io::Write;
                    match std::io::stdout().lock().write_all(text.as_bytes()) {
                        // a closed pipe (e.g. `| head`) is not an error
                        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                            return Err(proxskip::Error::Io {
                                context: "stdout".into(),
                                source: e,
                            })
                        }
                        _ => {}
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { only } => {
            let ids: Vec<usize> = match only {
                Some(id) => vec![id],
                None => (1..=verify::check_count()).collect(),
            };
            let mut all_passed = true;
            for id in ids {
                let outcome = verify::run_check(id)?;
                all_passed &= outcome.passed;
                println!("{outcome}");
            }
            Ok(if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
