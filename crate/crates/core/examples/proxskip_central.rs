//! ProxSkip against ProxGD on an L1-regularized quadratic: both reach the
//! same accuracy, ProxSkip with about sqrt(kappa) times fewer prox calls.

use proxskip::problems::{smoothness_constants, Problem, QuadraticProblem};
use proxskip::prox::ProxOperator;
use proxskip::record::RunControl;
use proxskip::solvers::{optimal_probability, run_prox_gd, run_proxskip, Probe, ProxSkipConfig};

fn main() -> proxskip::Result<()> {
    let f = Problem::Quadratic(QuadraticProblem::random(20, 1e3, 1)?);
    let info = smoothness_constants(&f)?;
    let psi = ProxOperator::l1(0.01)?;
    let probe = Probe::composite(&f, &psi, info.l)?;
    let gamma = 1.0 / info.l;
    let p = optimal_probability(&info)?;
    let control = RunControl::default().with_target(1e-10).with_log_every(u64::MAX);
    let x0 = vec![0.0; 20];

    let (gd, _) = run_prox_gd(&f, &psi, gamma, 1_000_000, x0.clone(), Some(&probe), &control)?;
    let cfg = ProxSkipConfig::new(gamma, p, 1_000_000, 0)?;
    let (skip, state) = run_proxskip(&f, &psi, &cfg, x0, vec![0.0; 20], Some(&probe), &control)?;

    println!("kappa = {:.0}, p = {p:.4}", info.kappa);
    println!("ProxGD:   {:?} after {} prox calls", gd.status, gd.last().comm_rounds);
    println!(
        "ProxSkip: {:?} after {} prox calls, {} gradients",
        skip.status,
        skip.last().comm_rounds,
        state.grad_calls
    );
    Ok(())
}
