//! Scaffnew and the GD, LocalGD and Scaffold baselines on logistic
//! regression whose samples are sharded by label across 10 clients.

use proxskip::federated::{
    run_gd_baseline, run_local_gd, run_scaffnew, run_scaffold, FederatedProbe, LocalStepsConfig,
};
use proxskip::problems::{heterogeneous_split, smoothness_constants, Federation, LogisticProblem, Problem, SplitMode};
use proxskip::record::RunControl;
use proxskip::solvers::{optimal_probability, Probe, ProxSkipConfig, StochasticOracle};

fn main() -> proxskip::Result<()> {
    let (data, labels) = LogisticProblem::synthetic(1000, 20, 0.1, 21)?;
    let global = Problem::Logistic(LogisticProblem::with_relative_lambda(data, labels, 1e-3)?);
    let split = heterogeneous_split(global.labels().unwrap(), 10, SplitMode::ShardByLabel, 0)?;
    let fed = Federation::new(global, split)?;
    let l = fed
        .clients()
        .iter()
        .map(|c| smoothness_constants(c).map(|s| s.l))
        .collect::<proxskip::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let info = smoothness_constants(fed.global())?;
    let p = optimal_probability(&proxskip::problems::SmoothnessInfo::new(l, info.mu)?)?;
    let tau = (1.0 / p).round() as u64;
    let rounds = 300;
    let probe = FederatedProbe::new(&fed)?;
    let x0 = vec![0.0; fed.dim()];
    let control = RunControl::default().with_comm_budget(rounds).with_log_every(u64::MAX);
    let exact = StochasticOracle::Exact;

    let central = Probe {
        x_star: probe.x_star.clone(),
        h_star: vec![0.0; fed.dim()],
    };
    let (gd, _) = run_gd_baseline(fed.global(), 1.0 / info.l, rounds, &x0, Some(&central), &control)?;
    let scaffnew_cfg = ProxSkipConfig::new(1.0 / l, p, 100 * rounds * tau, 0)?;
    let (scaffnew, _) = run_scaffnew(&fed, &scaffnew_cfg, &exact, &x0, Some(&probe), &control)?;
    let local_cfg = LocalStepsConfig::new(1.0 / l, tau, rounds, 0)?;
    let (local, _) = run_local_gd(&fed, &local_cfg, &exact, &x0, Some(&probe), &control)?;
    let (scaffold, _) = run_scaffold(&fed, &local_cfg, &exact, &x0, Some(&probe), &control)?;

    println!("{rounds} communication rounds, {tau} local steps per round");
    for rec in [&gd, &scaffnew, &local, &scaffold] {
        println!("{:<10} |x - x*|^2 = {:.3e}", rec.method, rec.last().dist_sq.unwrap());
    }
    Ok(())
}
