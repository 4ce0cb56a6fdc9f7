//! Stepsize, probability and horizon from the expected-smoothness rule,
//! then the average final Lyapunov value over many noise seeds.

use proxskip::problems::{smoothness_constants, Problem, QuadraticProblem};
use proxskip::prox::ProxOperator;
use proxskip::record::RunControl;
use proxskip::solvers::{
    expected_smoothness_constants, lyapunov, run_sproxskip, sproxskip_parameter_rule, Probe, ProxSkipConfig,
    StochasticOracle,
};

fn main() -> proxskip::Result<()> {
    let f = Problem::Quadratic(QuadraticProblem::random(10, 10.0, 8)?);
    let info = smoothness_constants(&f)?;
    let psi = ProxOperator::l1(0.01)?;
    let probe = Probe::composite(&f, &psi, info.l)?;
    let oracle = StochasticOracle::AdditiveGaussian { sigma: 0.1 };
    let es = expected_smoothness_constants(&oracle, &f, &info, Some(&probe.x_star))?;
    let zeros = vec![0.0; 10];

    for eps in [1e-2, 1e-3] {
        let guess = sproxskip_parameter_rule(&info, &es, eps, 1.0)?;
        let psi0 = lyapunov(&zeros, &zeros, &probe.x_star, &probe.h_star, guess.gamma, guess.p);
        let rule = sproxskip_parameter_rule(&info, &es, eps, psi0)?;
        let seeds = 50;
        let mut total = 0.0;
        for seed in 0..seeds {
            let cfg = ProxSkipConfig::new(rule.gamma, rule.p, rule.iterations, seed)?;
            let control = RunControl::default().with_log_every(u64::MAX);
            let (_, s) = run_sproxskip(&f, &psi, &oracle, &cfg, zeros.clone(), zeros.clone(), None, &control)?;
            total += lyapunov(&s.x, &s.h, &probe.x_star, &probe.h_star, cfg.gamma, cfg.p);
        }
        println!(
            "eps = {eps:e}: gamma = {:.4}, p = {:.4}, T = {}, mean final Psi = {:.3e}",
            rule.gamma,
            rule.p,
            rule.iterations,
            total / seeds as f64
        );
    }
    Ok(())
}
