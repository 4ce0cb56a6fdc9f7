//! Self-checks on built-in problems: the contraction and nonexpansiveness
//! inequalities, equivalences between solvers, rate and ordering
//! experiments, and output determinism.
//!
//! Each check returns a [`CheckOutcome`] with the measured quantity next to
//! its threshold; a check also fails when it exceeds its time budget.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::decentralized::{
    decentralized_optimal_probability, equivalence_check, mixing_matrix, run_decentralized_scaffnew,
    DecentralizedConfig, DecentralizedProbe, Topology,
};
use crate::error::{Error, Result};
use crate::federated::{run_local_gd, run_scaffnew, scaffnew_round, FederatedProbe, FederatedState, LocalStepsConfig};
use crate::harness::{plan_runs, run_experiment, ExperimentConfig, ExperimentContext, Manifest};
use crate::numerics::{dist_sq, norm};
use crate::problems::{
    heterogeneous_split, smoothness_constants, Federation, LogisticProblem, Objective, Problem, QuadraticProblem,
    SplitMode,
};
use crate::prox::{prox, ProxOperator};
use crate::record::{RunControl, RunStatus};
use crate::rng::{coin, StreamRng, GENERATOR_STREAM};
use crate::solvers::{
    expected_smoothness_constants, lyapunov, one_step_expected_lyapunov, optimal_probability, proxskip_step,
    run_sproxskip, sproxskip_parameter_rule, Probe, ProxSkipConfig, SolverState, StochasticOracle,
};

/// Result of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// Measured values against thresholds, human readable.
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:>2}. {} ({}; {:.2}s of {:.0}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, f64, Check); 12] = [
    ("one-step Lyapunov contraction", 5.0, one_step_contraction),
    ("gradient step contraction", 5.0, gradient_step_contraction),
    ("firm nonexpansiveness of proxes", 2.0, firm_nonexpansiveness),
    ("sqrt(kappa) vs kappa communication", 60.0, communication_separation),
    ("Scaffnew equals stacked ProxSkip", 10.0, scaffnew_matches_proxskip),
    ("LocalGD plateau vs Scaffnew", 60.0, local_gd_plateau),
    ("optimal communication probability", 120.0, probability_sweep),
    ("stochastic neighbourhood", 120.0, stochastic_neighbourhood),
    ("decentralized primal-dual equivalence", 10.0, decentralized_equivalence),
    ("decentralized rate", 60.0, decentralized_rate_check),
    ("control variate limits", 30.0, control_variate_limits),
    ("determinism", 30.0, determinism),
];

pub fn check_count() -> usize {
    CHECKS.len()
}

/// Runs check `id` (1-based).
pub fn run_check(id: usize) -> Result<CheckOutcome> {
    let (name, budget, f) = *CHECKS
        .get(id.wrapping_sub(1))
        .ok_or_else(|| Error::argument(format!("no check {id}; valid ids are 1..={}", CHECKS.len())))?;
    let start = Instant::now();
    let (ok, detail) = f()?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(CheckOutcome {
        id,
        name,
        passed: ok && seconds < budget,
        detail,
        seconds,
        budget_seconds: budget,
    })
}

pub fn run_all() -> Vec<Result<CheckOutcome>> {
    (1..=CHECKS.len()).map(run_check).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn one_step_contraction() -> Result<(bool, String)> {
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for (k, kappa) in [10.0, 100.0, 1e4].into_iter().enumerate() {
        let f = Problem::Quadratic(QuadraticProblem::random(10, kappa, 40 + k as u64)?);
        let info = smoothness_constants(&f)?;
        let psi = ProxOperator::l1(0.01)?;
        let probe = Probe::composite(&f, &psi, info.l)?;
        let gamma = 1.0 / info.l;
        for p in [1.0, 1.0 / kappa.sqrt(), 0.01] {
            let cfg = ProxSkipConfig::new(gamma, p, 500, 7)?;
            let mut rng = StreamRng::new(k as u64, GENERATOR_STREAM + 9, 0);
            let x0 = gaussian_vec(&mut rng, 10, 1.0);
            let mut state = SolverState::new(x0, vec![0.0; 10])?;
            let rate = (gamma * info.mu).min(p * p);
            for _ in 0..500 {
                let now = lyapunov(&state.x, &state.h, &probe.x_star, &probe.h_star, gamma, p);
                let next = one_step_expected_lyapunov(&state, &f, &psi, &cfg, &probe.x_star, &probe.h_star)?;
                worst = worst.max(next - (1.0 - rate) * now);
                checked += 1;
                proxskip_step(&mut state, &f, &psi, &cfg, None)?;
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max E[Psi'] - (1 - zeta) Psi = {worst:.3e} <= 1e-12 over {checked} states"),
    ))
}

fn gradient_step_contraction() -> Result<(bool, String)> {
    let quad = Problem::Quadratic(QuadraticProblem::random(10, 100.0, 3)?);
    let (data, labels) = LogisticProblem::synthetic(200, 10, 0.1, 5)?;
    let logistic = Problem::Logistic(LogisticProblem::with_relative_lambda(data, labels, 1e-2)?);
    let mut worst = f64::NEG_INFINITY;
    for (k, f) in [quad, logistic].iter().enumerate() {
        let info = smoothness_constants(f)?;
        let gamma = 1.0 / info.l;
        let x_star = f.minimizer()?;
        let g_star = f.gradient(&x_star);
        let w_star: Vec<f64> = x_star.iter().zip(&g_star).map(|(x, g)| x - gamma * g).collect();
        let mut rng = StreamRng::new(k as u64, GENERATOR_STREAM + 10, 0);
        for _ in 0..1000 {
            let x: Vec<f64> = x_star
                .iter()
                .zip(gaussian_vec(&mut rng, f.dim(), 3.0))
                .map(|(a, b)| a + b)
                .collect();
            let g = f.gradient(&x);
            let w: Vec<f64> = x.iter().zip(&g).map(|(x, g)| x - gamma * g).collect();
            let base = dist_sq(&x, &x_star);
            worst = worst.max((dist_sq(&w, &w_star) - (1.0 - gamma * info.mu) * base) / base);
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max relative excess {worst:.3e} <= 1e-12 over 2000 points"),
    ))
}

fn firm_nonexpansiveness() -> Result<(bool, String)> {
    let ops = [
        ProxOperator::consensus(4, 3)?,
        ProxOperator::l1(0.7)?,
        ProxOperator::squared_l2(1.3)?,
    ];
    let mut rng = StreamRng::new(0, GENERATOR_STREAM + 11, 0);
    let mut worst = f64::NEG_INFINITY;
    for op in &ops {
        for _ in 0..1000 {
            let scale = 10f64.powf(4.0 * rng.next_f64() - 2.0);
            let x = gaussian_vec(&mut rng, 12, 2.0);
            let y = gaussian_vec(&mut rng, 12, 2.0);
            let px = prox(op, scale, &x)?;
            let py = prox(op, scale, &y)?;
            let qx: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
            let qy: Vec<f64> = y.iter().zip(&py).map(|(a, b)| a - b).collect();
            worst = worst.max(dist_sq(&px, &py) + dist_sq(&qx, &qy) - dist_sq(&x, &y));
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max excess {worst:.3e} <= 1e-12 over 3000 triples"),
    ))
}

fn communication_separation() -> Result<(bool, String)> {
    let text = r#"{
        "problem": {"kind": "quadratic", "dim": 10, "kappa": 10000, "clients": 10, "seed": 11},
        "methods": ["gd", "scaffnew"],
        "target": 1e-6,
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        "log_every": 1000000
    }"#;
    let cfg = ExperimentConfig::from_json_str(text, None)?;
    let ctx = ExperimentContext::build(&cfg)?;
    let plans = plan_runs(&ctx, &cfg)?;
    let control = RunControl::default().with_target(1e-6).with_log_every(u64::MAX);
    let records: Vec<_> = plans
        .par_iter()
        .map(|run| crate::harness::execute(&ctx, run, &control))
        .collect::<Result<_>>()?;
    let rounds = |method: &str| -> Result<Vec<f64>> {
        records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| match r.status {
                RunStatus::ReachedTarget => Ok(r.last().comm_rounds as f64),
                s => Err(Error::argument(format!("{method} did not reach the target ({s:?})"))),
            })
            .collect()
    };
    let gd = median(rounds("gd")?);
    let scaffnew = median(rounds("scaffnew")?);
    let predicted = ctx.client_info.kappa.sqrt() * 1e6f64.ln();
    let ok = scaffnew <= gd / 10.0 && scaffnew >= predicted / 3.0 && scaffnew <= 3.0 * predicted;
    Ok((
        ok,
        format!(
            "median rounds scaffnew {scaffnew} vs gd {gd} (need <= 0.1x), predicted {predicted:.0} (need within 3x)"
        ),
    ))
}

fn scaffnew_matches_proxskip() -> Result<(bool, String)> {
    let configs = [
        (2, 3, 10.0, 0.5),
        (5, 4, 100.0, 0.1),
        (3, 6, 1e3, 0.2),
        (10, 2, 50.0, 0.05),
        (4, 5, 1e4, 1.0),
    ];
    let mut deviations = 0usize;
    for (k, &(clients, dim, kappa, p)) in configs.iter().enumerate() {
        let seed = 100 + k as u64;
        let fed = Federation::heterogeneous_quadratic(clients, dim, kappa, 1.0, seed)?;
        let gamma = 1.0 / smoothness_constants(fed.global())?.l;
        let cfg = ProxSkipConfig::new(gamma, p, 200, seed)?;
        let stacked = fed.stacked();
        let consensus = ProxOperator::consensus(clients, dim)?;
        let x0 = vec![0.5; dim];
        let mut a = FederatedState::new(clients, &x0);
        let mut b = SolverState::new(x0.repeat(clients), vec![0.0; clients * dim])?;
        for t in 0..200 {
            scaffnew_round(&mut a, &fed, gamma, p, coin(seed, t, p), &StochasticOracle::Exact, seed)?;
            proxskip_step(&mut b, &stacked, &consensus, &cfg, None)?;
            deviations += a.x.iter().zip(&b.x).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
            deviations += a.h.iter().zip(&b.h).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
        }
    }
    Ok((
        deviations == 0,
        format!("{deviations} differing entries over 5 configs x 200 steps"),
    ))
}

fn local_gd_plateau() -> Result<(bool, String)> {
    let (data, labels) = LogisticProblem::synthetic(1000, 20, 0.1, 21)?;
    let global = Problem::Logistic(LogisticProblem::with_relative_lambda(data, labels, 1e-4)?);
    let split = heterogeneous_split(global.labels().expect("logistic"), 10, SplitMode::ShardByLabel, 2)?;
    let fed = Federation::new(global, split)?;
    let mut l = 0.0f64;
    let mut mu = f64::INFINITY;
    for c in fed.clients() {
        let s = smoothness_constants(c)?;
        l = l.max(s.l);
        mu = mu.min(s.mu);
    }
    let info = crate::problems::SmoothnessInfo::new(l, mu)?;
    let gamma = 1.0 / l;
    let p = optimal_probability(&info)?;
    let tau = (1.0 / p).round() as u64;
    let rounds = 2000;
    let probe = FederatedProbe::new(&fed)?;
    let x0 = vec![0.0; fed.dim()];
    let psi0 = dist_sq(&x0, &probe.x_star);
    let control = RunControl::default().with_comm_budget(rounds);
    let local = LocalStepsConfig::new(gamma, tau, rounds, 0)?;
    let scaffnew = ProxSkipConfig::new(gamma, p, u64::MAX / 4, 0)?;
    let (local_rec, scaff_rec) = rayon::join(
        || run_local_gd(&fed, &local, &StochasticOracle::Exact, &x0, Some(&probe), &control),
        || run_scaffnew_rounds(&fed, &scaffnew, &x0, &probe, rounds),
    );
    let local_min = local_rec?
        .0
        .rows
        .iter()
        .filter_map(|r| r.dist_sq)
        .fold(f64::INFINITY, f64::min)
        / psi0;
    let scaff_min = scaff_rec? / psi0;
    Ok((
        local_min > 1e-4 && scaff_min < 1e-8,
        format!(
            "over {rounds} rounds (tau = {tau}): LocalGD min |x - x*|^2 / Psi0 = {local_min:.3e} (need > 1e-4), Scaffnew = {scaff_min:.3e} (need < 1e-8)"
        ),
    ))
}

/// Smallest `|x_mean - x*|^2` Scaffnew reaches within `rounds`
/// communications.
fn run_scaffnew_rounds(
    fed: &Federation,
    cfg: &ProxSkipConfig,
    x0: &[f64],
    probe: &FederatedProbe,
    rounds: u64,
) -> Result<f64> {
    let mut state = FederatedState::new(fed.num_clients(), x0);
    let mut best = dist_sq(x0, &probe.x_star);
    while state.comm_rounds < rounds {
        let theta = coin(cfg.seed, state.t, cfg.p);
        scaffnew_round(
            &mut state,
            fed,
            cfg.gamma,
            cfg.p,
            theta,
            &StochasticOracle::Exact,
            cfg.seed,
        )?;
        if theta {
            best = best.min(dist_sq(&state.mean(), &probe.x_star));
        }
    }
    Ok(best)
}

fn probability_sweep() -> Result<(bool, String)> {
    let fed = Federation::skewed_curvature_quadratic(4, 4, 9e4, 3)?;
    let probe = FederatedProbe::new(&fed)?;
    let x0 = vec![0.0; fed.dim()];
    let budget = 2000;
    let ps = [1.0 / 100.0, 1.0 / 300.0, 1.0 / 1000.0];
    let jobs: Vec<(usize, u64)> = (0..ps.len()).flat_map(|k| (0..11).map(move |s| (k, s))).collect();
    let errors: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let cap = (3.0 * budget as f64 / ps[k]) as u64;
            let cfg = ProxSkipConfig::new(1.0, ps[k], cap, seed)?;
            let control = RunControl::default().with_comm_budget(budget).with_log_every(u64::MAX);
            let (rec, _) = run_scaffnew(&fed, &cfg, &StochasticOracle::Exact, &x0, Some(&probe), &control)?;
            Ok((k, rec.last().dist_sq.expect("probe given")))
        })
        .collect::<Result<_>>()?;
    let med: Vec<f64> = (0..ps.len())
        .map(|k| median(errors.iter().filter(|e| e.0 == k).map(|e| e.1).collect()))
        .collect();
    Ok((
        med[1] <= med[0] && med[1] <= med[2],
        format!(
            "median |x - x*|^2 after {budget} rounds: p=1/100 {:.3e}, p=1/300 {:.3e}, p=1/1000 {:.3e}",
            med[0], med[1], med[2]
        ),
    ))
}

fn stochastic_neighbourhood() -> Result<(bool, String)> {
    let f = Problem::Quadratic(QuadraticProblem::random(10, 10.0, 8)?);
    let info = smoothness_constants(&f)?;
    let psi = ProxOperator::l1(0.01)?;
    let probe = Probe::composite(&f, &psi, info.l)?;
    let oracle = StochasticOracle::AdditiveGaussian { sigma: 0.1 };
    let es = expected_smoothness_constants(&oracle, &f, &info, Some(&probe.x_star))?;
    let x0 = vec![0.0; f.dim()];
    let h0 = vec![0.0; f.dim()];
    let rule = |eps: f64| -> Result<crate::solvers::SkipParameters> {
        let first = sproxskip_parameter_rule(&info, &es, eps, 1.0)?;
        let psi0 = lyapunov(&x0, &h0, &probe.x_star, &probe.h_star, first.gamma, first.p);
        sproxskip_parameter_rule(&info, &es, eps, psi0)
    };
    let coarse = rule(1e-2)?;
    let fine = rule(1e-3)?;
    let finals: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = ProxSkipConfig::new(coarse.gamma, coarse.p, coarse.iterations, seed)?;
            let control = RunControl::default().with_log_every(u64::MAX);
            let (_, s) = run_sproxskip(&f, &psi, &oracle, &cfg, x0.clone(), h0.clone(), None, &control)?;
            Ok(lyapunov(&s.x, &s.h, &probe.x_star, &probe.h_star, cfg.gamma, cfg.p))
        })
        .collect::<Result<_>>()?;
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let ratio = fine.iterations as f64 / coarse.iterations as f64;
    Ok((
        mean <= 1.5e-2 && (5.0..=20.0).contains(&ratio),
        format!(
            "mean Psi_T = {mean:.3e} (need <= 1.5e-2, T = {}); T(1e-3)/T(1e-2) = {ratio:.2} (need 5..20)",
            coarse.iterations
        ),
    ))
}

fn decentralized_equivalence() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for (k, top) in [
        Topology::Ring { n: 5 },
        Topology::Complete { n: 4 },
        Topology::Star { n: 6 },
    ]
    .iter()
    .enumerate()
    {
        let fed = Federation::heterogeneous_quadratic(top.nodes(), 3, 50.0, 1.0, 60 + k as u64)?;
        let mixing = mixing_matrix(top)?;
        let gamma = 1.0 / smoothness_constants(fed.global())?.l;
        let p = 0.3;
        let cfg = DecentralizedConfig::new(gamma, 0.8 * p / gamma, p, 200, k as u64)?;
        worst = worst.max(equivalence_check(&fed, &mixing, &cfg, &[0.3, -0.2, 0.1])?);
    }
    Ok((worst <= 1e-9, format!("max lockstep deviation {worst:.3e} <= 1e-9")))
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn decentralized_rate_check() -> Result<(bool, String)> {
    let top = Topology::Ring { n: 8 };
    let fed = Federation::heterogeneous_quadratic(8, 5, 100.0, 1.0, 70)?;
    let mixing = mixing_matrix(&top)?;
    let info = smoothness_constants(fed.global())?;
    let delta = mixing.delta();
    let gamma = 1.0 / info.l;
    let p = decentralized_optimal_probability(&info, delta)?;
    let probe = DecentralizedProbe::new(&fed, &mixing)?;
    let rate = (gamma * info.mu).min(p * gamma * (p / gamma) * delta);
    let predicted = (1.0 - rate).ln();
    let iterations = (20.0 * 10f64.ln() / rate).ceil() as u64;
    let x0 = vec![1.0; fed.dim()];
    let slopes: Vec<f64> = (0..11u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = DecentralizedConfig::full_mixing(gamma, p, iterations, seed)?;
            let (rec, _) = run_decentralized_scaffnew(&fed, &mixing, &cfg, &x0, Some(&probe), &RunControl::default())?;
            let start = rec.first().dist_sq.expect("probe given");
            // stop before the error reaches floating-point resolution
            let usable: Vec<(f64, f64)> = rec
                .rows
                .iter()
                .filter_map(|r| r.dist_sq.map(|d| (r.t as f64, d)))
                .take_while(|(_, d)| *d > 1e-20 * start)
                .collect();
            let tail = &usable[usable.len() / 2..];
            let xs: Vec<f64> = tail.iter().map(|r| r.0).collect();
            let ys: Vec<f64> = tail.iter().map(|r| r.1.ln()).collect();
            Ok(slope(&xs, &ys))
        })
        .collect::<Result<_>>()?;
    let observed = median(slopes);
    Ok((
        observed <= predicted / 3.0,
        format!(
            "median tail slope of ln|x - x*|^2 = {observed:.4e} per step (need <= {:.4e}, a third of ln(1 - {rate:.3e}))",
            predicted / 3.0
        ),
    ))
}

fn control_variate_limits() -> Result<(bool, String)> {
    let f = Problem::Quadratic(QuadraticProblem::random(10, 100.0, 90)?);
    let info = smoothness_constants(&f)?;
    let psi = ProxOperator::l1(0.05)?;
    let probe = Probe::composite(&f, &psi, info.l)?;
    let cfg = ProxSkipConfig::new(1.0 / info.l, 0.1, 20_000, 1)?;
    let mut state = SolverState::at(vec![1.0; 10]);
    for _ in 0..cfg.iterations {
        proxskip_step(&mut state, &f, &psi, &cfg, None)?;
    }
    let central = norm(&crate::numerics::sub(&state.h, &probe.h_star));

    let fed = Federation::heterogeneous_quadratic(5, 6, 100.0, 1.0, 91)?;
    let fprobe = FederatedProbe::new(&fed)?;
    let gamma = 1.0 / smoothness_constants(fed.global())?.l;
    let fcfg = ProxSkipConfig::new(gamma, 0.1, 20_000, 2)?;
    let control = RunControl::default().with_log_every(u64::MAX);
    let (_, fs) = run_scaffnew(
        &fed,
        &fcfg,
        &StochasticOracle::Exact,
        &[1.0; 6],
        Some(&fprobe),
        &control,
    )?;
    let federated = (0..fed.num_clients())
        .map(|i| {
            let d = fed.dim();
            norm(&crate::numerics::sub(fs.control(i), &fprobe.h_star[i * d..(i + 1) * d]))
        })
        .fold(0.0, f64::max);
    Ok((
        central <= 1e-6 && federated <= 1e-6,
        format!("|h_T - grad f(x*)| = {central:.3e}, max_i |h_i,T - grad f_i(x*)| = {federated:.3e} (need <= 1e-6)"),
    ))
}

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("proxskip-{tag}-{}-{nanos}", std::process::id()))
}

fn without_timing(mut m: Manifest) -> Manifest {
    for r in &mut m.runs {
        r.wall_clock_seconds = 0.0;
    }
    m
}

fn determinism() -> Result<(bool, String)> {
    let text = r#"{
        "problem": {"kind": "quadratic", "dim": 6, "kappa": 50, "clients": 4, "seed": 5},
        "topology": {"kind": "ring", "n": 4},
        "methods": [
            "gd", "scaffnew", "local-gd", "scaffold", "decentralized-scaffnew",
            {"name": "scaffnew", "label": "noisy", "oracle": {"kind": "gaussian", "sigma": 0.05}}
        ],
        "iterations": 400,
        "seeds": [0, 1, 2]
    }"#;
    let cfg = ExperimentConfig::from_json_str(text, None)?;
    let hash = crate::harness::config_hash_of_text(text)?;
    let dirs = [scratch_dir("a"), scratch_dir("b"), scratch_dir("c")];
    let result = (|| -> Result<(bool, String)> {
        let mut manifests = Vec::new();
        for (dir, jobs) in dirs.iter().zip([1, 4, 4]) {
            manifests.push(without_timing(run_experiment(&cfg, dir, jobs, &hash)?));
        }
        let mut mismatched = 0usize;
        let mut files = 0usize;
        for run in &manifests[0].runs {
            let base = std::fs::read(dirs[0].join(&run.file)).map_err(|e| Error::io(&dirs[0], e))?;
            for dir in &dirs[1..] {
                let other = std::fs::read(dir.join(&run.file)).map_err(|e| Error::io(dir, e))?;
                mismatched += usize::from(other != base);
            }
            files += 1;
        }
        let same_manifest = manifests.iter().all(|m| *m == manifests[0]);
        Ok((
            mismatched == 0 && same_manifest,
            format!("{files} CSVs x 3 runs (jobs 1, 4, 4): {mismatched} differ; manifests equal: {same_manifest}"),
        ))
    })();
    for dir in &dirs {
        let _ = std::fs::remove_dir_all(dir);
    }
    result
}
