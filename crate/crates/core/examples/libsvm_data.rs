//! LIBSVM input: parse a file (or a generated stand-in), truncate it and
//! fit regularized logistic regression with ProxSkip's federated form.
//!
//! `cargo run --example libsvm_data -- path/to/w8a`

use proxskip::federated::{run_scaffnew, FederatedProbe};
use proxskip::problems::{
    heterogeneous_split, parse_libsvm, read_libsvm, smoothness_constants, write_libsvm, Dataset, Federation,
    LogisticProblem, Problem, SplitMode,
};
use proxskip::record::RunControl;
use proxskip::solvers::{ProxSkipConfig, StochasticOracle};

fn main() -> proxskip::Result<()> {
    let dataset = match std::env::args().nth(1) {
        Some(path) => read_libsvm(path.as_ref())?,
        None => {
            let (data, labels) = LogisticProblem::synthetic(500, 30, 0.05, 4)?;
            parse_libsvm(&write_libsvm(&Dataset { data, labels }))?
        }
    };
    let ds = dataset.truncate(Some(400), Some(20))?;
    println!("{} samples x {} features", ds.data.rows(), ds.data.cols());
    let global = Problem::Logistic(LogisticProblem::with_relative_lambda(ds.data, ds.labels, 1e-3)?);
    let split = heterogeneous_split(global.labels().unwrap(), 5, SplitMode::RoundRobin, 0)?;
    let fed = Federation::new(global, split)?;
    let l = fed
        .clients()
        .iter()
        .map(|c| smoothness_constants(c).unwrap().l)
        .fold(0.0, f64::max);
    let cfg = ProxSkipConfig::new(1.0 / l, 0.1, 20_000, 0)?;
    let probe = FederatedProbe::new(&fed)?;
    let control = RunControl::default().with_target(1e-12).with_log_every(1000);
    let (rec, state) = run_scaffnew(
        &fed,
        &cfg,
        &StochasticOracle::Exact,
        &vec![0.0; fed.dim()],
        Some(&probe),
        &control,
    )?;
    for row in &rec.rows {
        println!(
            "t = {:>6} rounds = {:>5} |x - x*|^2 = {:.3e}",
            row.t,
            row.comm_rounds,
            row.dist_sq.unwrap()
        );
    }
    println!(
        "objective at the mean iterate: {:.6}",
        proxskip::problems::Objective::value(fed.global(), &state.mean())
    );
    Ok(())
}
