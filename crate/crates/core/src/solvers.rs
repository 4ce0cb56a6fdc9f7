//! Single-process solvers for `min f(x) + psi(x)`: ProxGD, ProxSkip and
//! its stochastic-gradient variant.
//!
//! ProxSkip keeps a control variate `h` next to the iterate. Each step is a
//! gradient step shifted by `h`; with probability `p` the prox is applied
//! (with the enlarged stepsize `gamma / p`) and `h` is corrected, otherwise
//! the prox is skipped and `h` stays put.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{check_dim, dist_sq, norm_sq};
use crate::problems::{Objective, Problem, SmoothnessInfo};
use crate::prox::{prox, ProxOperator};
use crate::record::{max_magnitude, Recorder, RunControl, RunRecord, RunRow, RunStatus};
use crate::rng::{coin, StreamRng, GRADIENT_STREAM};

/// Stepsize, prox probability, iteration count and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxSkipConfig {
    pub gamma: f64,
    pub p: f64,
    pub iterations: u64,
    pub seed: u64,
}

impl ProxSkipConfig {
    pub fn new(gamma: f64, p: f64, iterations: u64, seed: u64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::argument(format!("stepsize must be > 0, got {gamma}")));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::argument(format!("probability must be in (0, 1], got {p}")));
        }
        Ok(Self {
            gamma,
            p,
            iterations,
            seed,
        })
    }
}

/// Iterate, control variate and counters. The coin of step `t` is a pure
/// function of `(seed, t)`, so the step counter is the whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub t: u64,
    pub prox_calls: u64,
    pub grad_calls: u64,
}

impl SolverState {
    pub fn new(x0: Vec<f64>, h0: Vec<f64>) -> Result<Self> {
        check_dim("control variate", x0.len(), h0.len())?;
        Ok(Self {
            x: x0,
            h: h0,
            t: 0,
            prox_calls: 0,
            grad_calls: 0,
        })
    }

    /// Zero control variate.
    pub fn at(x0: Vec<f64>) -> Self {
        let h = vec![0.0; x0.len()];
        Self {
            x: x0,
            h,
            t: 0,
            prox_calls: 0,
            grad_calls: 0,
        }
    }
}

/// Minimizer and control-variate limit used for error and Lyapunov logging.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x_star: Vec<f64>,
    pub h_star: Vec<f64>,
}

impl Probe {
    /// `x*` of `f` and `h* = grad f(x*)`.
    pub fn for_problem(p: &Problem) -> Result<Self> {
        let x_star = p.minimizer()?;
        let h_star = p.gradient(&x_star);
        Ok(Self { x_star, h_star })
    }

    /// `x*` of `f + psi` from a long ProxGD run, with `h* = grad f(x*)`.
    pub fn composite<F: Objective + ?Sized>(f: &F, psi: &ProxOperator, l: f64) -> Result<Self> {
        let x_star = composite_reference(f, psi, l)?;
        let h_star = f.gradient(&x_star);
        Ok(Self { x_star, h_star })
    }
}

/// ProxGD with `gamma = 1/L` until the iterate stops changing in floating
/// point (checked every step) or 10^6 steps.
fn composite_reference<F: Objective + ?Sized>(f: &F, psi: &ProxOperator, l: f64) -> Result<Vec<f64>> {
    let gamma = 1.0 / l;
    let mut x = vec![0.0; f.dim()];
    for _ in 0..1_000_000 {
        let next = prox_gd_step(f, psi, gamma, &x)?;
        if next == x {
            break;
        }
        x = next;
    }
    Ok(x)
}

/// `prox_{gamma psi}(x - gamma grad f(x))`.
pub fn prox_gd_step<F: Objective + ?Sized>(f: &F, psi: &ProxOperator, gamma: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("prox_gd_step", f.dim(), x.len())?;
    let g = f.gradient(x);
    let w: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - gamma * gi).collect();
    prox(psi, gamma, &w)
}

/// The ProxSkip update given a gradient estimate `g` at `x`.
///
/// `x_hat = x - gamma (g - h)`; on a prox step
/// `x = prox(x_hat - (gamma/p) h)` and `h += (p/gamma)(x - x_hat)`,
/// otherwise `x = x_hat` and `h` is untouched.
pub(crate) fn skip_update(
    x: &mut [f64],
    h: &mut [f64],
    g: &[f64],
    gamma: f64,
    p: f64,
    theta: bool,
    prox_map: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<()> {
    for ((xi, gi), hi) in x.iter_mut().zip(g).zip(h.iter()) {
        *xi -= gamma * (gi - hi);
    }
    if theta {
        let s = gamma / p;
        let shifted: Vec<f64> = x.iter().zip(h.iter()).map(|(xi, hi)| xi - s * hi).collect();
        let next = prox_map(&shifted)?;
        let r = p / gamma;
        for ((xi, hi), ni) in x.iter_mut().zip(h.iter_mut()).zip(&next) {
            *hi += r * (ni - *xi);
            *xi = *ni;
        }
    }
    Ok(())
}

/// One ProxSkip step with the exact gradient. The coin is drawn from the
/// configured seed unless `forced` is given. Returns whether the prox ran.
pub fn proxskip_step<F: Objective + ?Sized>(
    state: &mut SolverState,
    f: &F,
    psi: &ProxOperator,
    cfg: &ProxSkipConfig,
    forced: Option<bool>,
) -> Result<bool> {
    check_dim("proxskip_step", f.dim(), state.x.len())?;
    let g = f.gradient(&state.x);
    step_with_gradient(state, &g, psi, cfg, forced)
}

fn step_with_gradient(
    state: &mut SolverState,
    g: &[f64],
    psi: &ProxOperator,
    cfg: &ProxSkipConfig,
    forced: Option<bool>,
) -> Result<bool> {
    let theta = forced.unwrap_or_else(|| coin(cfg.seed, state.t, cfg.p));
    let scale = cfg.gamma / cfg.p;
    skip_update(&mut state.x, &mut state.h, g, cfg.gamma, cfg.p, theta, |v| {
        prox(psi, scale, v)
    })?;
    state.t += 1;
    state.grad_calls += 1;
    state.prox_calls += u64::from(theta);
    Ok(theta)
}

/// `|x - x*|^2 + (gamma/p)^2 |h - h*|^2`.
pub fn lyapunov(x: &[f64], h: &[f64], x_star: &[f64], h_star: &[f64], gamma: f64, p: f64) -> f64 {
    let r = gamma / p;
    dist_sq(x, x_star) + r * r * dist_sq(h, h_star)
}

/// `E[Psi_{t+1}]` over the coin, by evaluating both branches.
pub fn one_step_expected_lyapunov<F: Objective + ?Sized>(
    state: &SolverState,
    f: &F,
    psi: &ProxOperator,
    cfg: &ProxSkipConfig,
    x_star: &[f64],
    h_star: &[f64],
) -> Result<f64> {
    let branch = |theta: bool| -> Result<f64> {
        let mut s = state.clone();
        proxskip_step(&mut s, f, psi, cfg, Some(theta))?;
        Ok(lyapunov(&s.x, &s.h, x_star, h_star, cfg.gamma, cfg.p))
    };
    let with_prox = branch(true)?;
    if cfg.p == 1.0 {
        return Ok(with_prox);
    }
    Ok(cfg.p * with_prox + (1.0 - cfg.p) * branch(false)?)
}

/// `p = 1/sqrt(kappa)`, the choice balancing `gamma mu` against `p^2`.
pub fn optimal_probability(info: &SmoothnessInfo) -> Result<f64> {
    if !(info.mu > 0.0) {
        return Err(Error::argument("optimal probability needs mu > 0"));
    }
    Ok((info.mu / info.l).sqrt().min(1.0))
}

/// Contraction factor `zeta = min(gamma mu, p^2)` of the Lyapunov function.
pub fn contraction_rate(gamma: f64, mu: f64, p: f64) -> f64 {
    (gamma * mu).min(p * p)
}

/// Gradient estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StochasticOracle {
    Exact,
    /// Adds `sigma / sqrt(d) * z` with `z` standard normal, so that the
    /// noise has total variance `sigma^2`.
    AdditiveGaussian {
        sigma: f64,
    },
    /// Mean of `batch` sample gradients drawn without replacement.
    Minibatch {
        batch: usize,
    },
}

impl StochasticOracle {
    pub fn validate(&self, p: &Problem) -> Result<()> {
        match *self {
            StochasticOracle::Exact => Ok(()),
            StochasticOracle::AdditiveGaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            StochasticOracle::AdditiveGaussian { sigma } => {
                Err(Error::argument(format!("sigma must be >= 0, got {sigma}")))
            }
            StochasticOracle::Minibatch { batch } if batch >= 1 && batch <= p.num_samples() => Ok(()),
            StochasticOracle::Minibatch { batch } => Err(Error::argument(format!(
                "batch must be in 1..={}, got {batch}",
                p.num_samples()
            ))),
        }
    }

    pub fn is_exact(&self) -> bool {
        match self {
            StochasticOracle::Exact => true,
            StochasticOracle::AdditiveGaussian { sigma } => *sigma == 0.0,
            StochasticOracle::Minibatch { .. } => false,
        }
    }
}

/// Draws `g(x)`. Randomness comes from stream `GRADIENT_STREAM` at
/// `index`, separate from the coin stream.
pub fn stochastic_gradient(
    oracle: &StochasticOracle,
    p: &Problem,
    x: &[f64],
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    check_dim("stochastic_gradient", p.dim(), x.len())?;
    let mut g = vec![0.0; x.len()];
    stochastic_gradient_into(oracle, p, x, seed, index, &mut g);
    Ok(g)
}

pub(crate) fn stochastic_gradient_into(
    oracle: &StochasticOracle,
    p: &Problem,
    x: &[f64],
    seed: u64,
    index: u64,
    out: &mut [f64],
) {
    match *oracle {
        StochasticOracle::Exact => p.gradient_into(x, out),
        StochasticOracle::AdditiveGaussian { sigma } => {
            p.gradient_into(x, out);
            if sigma > 0.0 {
                let s = sigma / (x.len() as f64).sqrt();
                let mut rng = StreamRng::new(seed, GRADIENT_STREAM, index);
                for o in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *o += s * z;
                }
            }
        }
        StochasticOracle::Minibatch { batch } => {
            let mut rng = StreamRng::new(seed, GRADIENT_STREAM, index);
            let mut idx = rand::seq::index::sample(&mut rng, p.num_samples(), batch).into_vec();
            idx.sort_unstable();
            out.copy_from_slice(&p.subset_gradient(&idx, x));
        }
    }
}

/// Constants `A`, `C` of `E|g(x) - grad f(x*)|^2 <= 2A D_f(x, x*) + C`.
/// `c` is `None` when it depends on an unknown `x*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedSmoothness {
    pub a: f64,
    pub c: Option<f64>,
}

/// Exact: `(L, 0)`. Gaussian: `(L, sigma^2)`. Minibatch of size `b` out of
/// `N` without replacement:
/// `A = N(b-1)/(b(N-1)) L + (N-b)/(b(N-1)) L_max` and
/// `C = 2(N-b)/(b(N-1)) * 1/N sum_j |grad f_j(x*)|^2`.
pub fn expected_smoothness_constants(
    oracle: &StochasticOracle,
    p: &Problem,
    info: &SmoothnessInfo,
    x_star: Option<&[f64]>,
) -> Result<ExpectedSmoothness> {
    oracle.validate(p)?;
    match *oracle {
        StochasticOracle::Exact => Ok(ExpectedSmoothness {
            a: info.l,
            c: Some(0.0),
        }),
        StochasticOracle::AdditiveGaussian { sigma } => Ok(ExpectedSmoothness {
            a: info.l,
            c: Some(sigma * sigma),
        }),
        StochasticOracle::Minibatch { batch } => {
            let n = p.num_samples();
            if batch == n {
                return Ok(ExpectedSmoothness {
                    a: info.l,
                    c: Some(0.0),
                });
            }
            let (nf, b) = (n as f64, batch as f64);
            let l_max = p.sample_smoothness()?.into_iter().fold(0.0, f64::max);
            let a = nf * (b - 1.0) / (b * (nf - 1.0)) * info.l + (nf - b) / (b * (nf - 1.0)) * l_max;
            let c = match x_star {
                Some(xs) => {
                    let mut g = vec![0.0; xs.len()];
                    let mut total = 0.0;
                    for j in 0..n {
                        p.sample_gradient_into(j, xs, &mut g);
                        total += norm_sq(&g);
                    }
                    Some(2.0 * (nf - b) / (b * (nf - 1.0)) * total / nf)
                }
                None => None,
            };
            Ok(ExpectedSmoothness { a, c })
        }
    }
}

/// Stepsize, probability and iteration count for reaching `E[Psi_T] <= eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipParameters {
    pub gamma: f64,
    pub p: f64,
    pub iterations: u64,
}

/// `gamma = min(1/A, eps mu / (2C))`, `p = sqrt(gamma mu)` and
/// `T = ceil(max(A/mu, 2C/(eps mu^2)) * ln(2 Psi_0 / eps))`. An unknown or
/// zero `C` uses the `1/A` branch.
pub fn sproxskip_parameter_rule(
    info: &SmoothnessInfo,
    es: &ExpectedSmoothness,
    epsilon: f64,
    psi0: f64,
) -> Result<SkipParameters> {
    if !(info.mu > 0.0) {
        return Err(Error::argument("parameter rule needs mu > 0"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::argument(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    if !(es.a > 0.0) {
        return Err(Error::argument("expected smoothness A must be > 0"));
    }
    let mu = info.mu;
    let c = es.c.unwrap_or(0.0);
    let mut gamma = 1.0 / es.a;
    let mut horizon = es.a / mu;
    if c > 0.0 {
        gamma = gamma.min(epsilon * mu / (2.0 * c));
        horizon = horizon.max(2.0 * c / (epsilon * mu * mu));
    }
    let p = (gamma * mu).sqrt().min(1.0);
    let log = (2.0 * psi0 / epsilon).ln().max(0.0);
    let iterations = (horizon * log).ceil() as u64;
    Ok(SkipParameters { gamma, p, iterations })
}

fn central_row(state: &SolverState, probe: Option<&Probe>, cfg: &ProxSkipConfig) -> RunRow {
    RunRow {
        t: state.t,
        comm_rounds: state.prox_calls,
        grad_evals: state.grad_calls,
        dist_sq: probe.map(|pr| dist_sq(&state.x, &pr.x_star)),
        lyapunov: probe.map(|pr| lyapunov(&state.x, &state.h, &pr.x_star, &pr.h_star, cfg.gamma, cfg.p)),
        dispersion: None,
    }
}

fn drive(
    state: &mut SolverState,
    cfg: &ProxSkipConfig,
    probe: Option<&Probe>,
    control: &RunControl,
    method: &str,
    mut step: impl FnMut(&mut SolverState) -> Result<()>,
) -> Result<RunRecord> {
    let mut rec = Recorder::new(method, cfg.seed, *control);
    if let Some(status) = rec.observe(central_row(state, probe, cfg), max_magnitude(&state.x)) {
        return Ok(rec.finish(status));
    }
    for _ in 0..cfg.iterations {
        step(state)?;
        if let Some(status) = rec.observe(central_row(state, probe, cfg), max_magnitude(&state.x)) {
            return Ok(rec.finish(status));
        }
    }
    Ok(rec.finish(RunStatus::Completed))
}

/// Runs ProxSkip from `(x0, h0)` for `cfg.iterations` steps.
pub fn run_proxskip<F: Objective + ?Sized>(
    f: &F,
    psi: &ProxOperator,
    cfg: &ProxSkipConfig,
    x0: Vec<f64>,
    h0: Vec<f64>,
    probe: Option<&Probe>,
    control: &RunControl,
) -> Result<(RunRecord, SolverState)> {
    check_dim("run_proxskip", f.dim(), x0.len())?;
    let mut state = SolverState::new(x0, h0)?;
    let mut g = vec![0.0; f.dim()];
    let record = drive(&mut state, cfg, probe, control, "proxskip", |s| {
        f.gradient_into(&s.x, &mut g);
        step_with_gradient(s, &g, psi, cfg, None).map(|_| ())
    })?;
    Ok((record, state))
}

/// ProxSkip with gradients from `oracle`; the noise of step `t` is keyed
/// by `(seed, t)`, and the coins match [`run_proxskip`] with the same seed.
pub fn run_sproxskip(
    problem: &Problem,
    psi: &ProxOperator,
    oracle: &StochasticOracle,
    cfg: &ProxSkipConfig,
    x0: Vec<f64>,
    h0: Vec<f64>,
    probe: Option<&Probe>,
    control: &RunControl,
) -> Result<(RunRecord, SolverState)> {
    check_dim("run_sproxskip", problem.dim(), x0.len())?;
    oracle.validate(problem)?;
    let mut state = SolverState::new(x0, h0)?;
    let mut g = vec![0.0; problem.dim()];
    let record = drive(&mut state, cfg, probe, control, "sproxskip", |s| {
        stochastic_gradient_into(oracle, problem, &s.x, cfg.seed, s.t, &mut g);
        step_with_gradient(s, &g, psi, cfg, None).map(|_| ())
    })?;
    Ok((record, state))
}

/// ProxGD: every step applies the prox, one communication per step.
/// The logged Lyapunov value is `|x - x*|^2`.
pub fn run_prox_gd<F: Objective + ?Sized>(
    f: &F,
    psi: &ProxOperator,
    gamma: f64,
    iterations: u64,
    x0: Vec<f64>,
    probe: Option<&Probe>,
    control: &RunControl,
) -> Result<(RunRecord, Vec<f64>)> {
    check_dim("run_prox_gd", f.dim(), x0.len())?;
    if !(gamma > 0.0) {
        return Err(Error::argument(format!("stepsize must be > 0, got {gamma}")));
    }
    let row = |x: &[f64], t: u64| {
        let d = probe.map(|pr| dist_sq(x, &pr.x_star));
        RunRow {
            t,
            comm_rounds: t,
            grad_evals: t,
            dist_sq: d,
            lyapunov: d,
            dispersion: None,
        }
    };
    let mut rec = Recorder::new("proxgd", 0, *control);
    let mut x = x0;
    if let Some(status) = rec.observe(row(&x, 0), max_magnitude(&x)) {
        return Ok((rec.finish(status), x));
    }
    for t in 1..=iterations {
        x = prox_gd_step(f, psi, gamma, &x)?;
        if let Some(status) = rec.observe(row(&x, t), max_magnitude(&x)) {
            return Ok((rec.finish(status), x));
        }
    }
    Ok((rec.finish(RunStatus::Completed), x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sub, SymMatrix};
    use crate::problems::{smoothness_constants, LogisticProblem, QuadraticProblem};
    use proptest::prelude::*;

    fn quad(a: &[f64], b: &[f64]) -> Problem {
        Problem::Quadratic(QuadraticProblem::new(SymMatrix::diagonal(a), b.to_vec()).unwrap())
    }

    #[test]
    fn prox_gd_examples() {
        let f = quad(&[1.0, 1.0], &[2.0, -1.0]);
        // f = 1/2|x - a|^2 with a = b; gamma = 1 lands on a
        let x = prox_gd_step(&f, &ProxOperator::zero(), 1.0, &[5.0, 7.0]).unwrap();
        assert_eq!(x, vec![2.0, -1.0]);

        let f = quad(&[1.0], &[0.0]);
        let x = prox_gd_step(&f, &ProxOperator::l1(1.0).unwrap(), 1.0, &[3.0]).unwrap();
        assert_eq!(x, vec![0.0]);

        let f = quad(&[2.0, 0.5], &[1.0, 1.0]);
        let x = [0.3, -0.2];
        let g = f.gradient(&x);
        let plain = prox_gd_step(&f, &ProxOperator::zero(), 0.1, &x).unwrap();
        assert_eq!(plain, vec![x[0] - 0.1 * g[0], x[1] - 0.1 * g[1]]);
    }

    #[test]
    fn skipped_step_keeps_control_variate() {
        let f = quad(&[3.0, 1.0], &[1.0, 0.0]);
        let cfg = ProxSkipConfig::new(0.2, 0.3, 1, 0).unwrap();
        let mut s = SolverState::new(vec![1.0, 2.0], vec![0.5, -0.25]).unwrap();
        let h = s.h.clone();
        proxskip_step(&mut s, &f, &ProxOperator::l1(0.1).unwrap(), &cfg, Some(false)).unwrap();
        assert_eq!(s.h, h);
        assert_eq!((s.prox_calls, s.grad_calls, s.t), (0, 1, 1));
    }

    #[test]
    fn full_probability_matches_prox_gd() {
        let f = quad(&[3.0, 1.0], &[1.0, 0.0]);
        let psi = ProxOperator::zero();
        let cfg = ProxSkipConfig::new(0.2, 1.0, 1, 0).unwrap();
        let mut s = SolverState::at(vec![1.0, 2.0]);
        let expected = prox_gd_step(&f, &psi, 0.2, &s.x).unwrap();
        proxskip_step(&mut s, &f, &psi, &cfg, None).unwrap();
        assert_eq!(s.x, expected);
        assert_eq!(s.h, vec![0.0, 0.0]);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let f = quad(&[3.0, 1.0], &[1.0, 2.0]);
        let probe = Probe::for_problem(&f).unwrap();
        let cfg = ProxSkipConfig::new(0.2, 0.5, 1, 0).unwrap();
        for theta in [false, true] {
            let mut s = SolverState::new(probe.x_star.clone(), probe.h_star.clone()).unwrap();
            proxskip_step(&mut s, &f, &ProxOperator::zero(), &cfg, Some(theta)).unwrap();
            assert_eq!(s.x, probe.x_star);
            assert_eq!(s.h, probe.h_star);
        }
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov(&[1.0], &[2.0], &[1.0], &[2.0], 0.3, 0.2), 0.0);
        assert_eq!(lyapunov(&[2.0, 0.0], &[1.0], &[0.0, 0.0], &[1.0], 1.0, 1.0), 4.0);
        let v = lyapunov(&[1.0], &[5.0], &[0.0], &[0.0], 0.1, 0.5);
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_horizon_keeps_initial_row() {
        let f = quad(&[1.0], &[1.0]);
        let cfg = ProxSkipConfig::new(0.5, 0.5, 0, 0).unwrap();
        let (rec, _) = run_proxskip(
            &f,
            &ProxOperator::zero(),
            &cfg,
            vec![0.0],
            vec![0.0],
            None,
            &RunControl::default(),
        )
        .unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].t, 0);
    }

    #[test]
    fn zero_regularizer_run_is_gradient_descent() {
        let f = Problem::Quadratic(QuadraticProblem::random(4, 50.0, 2).unwrap());
        let gamma = 0.9;
        let cfg = ProxSkipConfig::new(gamma, 0.2, 300, 17).unwrap();
        let (_, state) = run_proxskip(
            &f,
            &ProxOperator::zero(),
            &cfg,
            vec![1.0; 4],
            vec![0.0; 4],
            None,
            &RunControl::default(),
        )
        .unwrap();
        let mut x = vec![1.0; 4];
        for _ in 0..300 {
            let g = f.gradient(&x);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= gamma * (gi - 0.0);
            }
        }
        assert_eq!(state.x, x);
        assert!(state.h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn expected_lyapunov_edge_cases() {
        let f = quad(&[3.0, 1.0], &[1.0, 2.0]);
        let probe = Probe::for_problem(&f).unwrap();
        let psi = ProxOperator::zero();
        let cfg = ProxSkipConfig::new(0.2, 0.5, 1, 0).unwrap();
        let s = SolverState::new(probe.x_star.clone(), probe.h_star.clone()).unwrap();
        assert_eq!(
            one_step_expected_lyapunov(&s, &f, &psi, &cfg, &probe.x_star, &probe.h_star).unwrap(),
            0.0
        );

        let cfg1 = ProxSkipConfig::new(0.2, 1.0, 1, 0).unwrap();
        let s = SolverState::new(vec![2.0, -1.0], vec![0.3, 0.1]).unwrap();
        let mut t = s.clone();
        proxskip_step(&mut t, &f, &psi, &cfg1, Some(true)).unwrap();
        let direct = lyapunov(&t.x, &t.h, &probe.x_star, &probe.h_star, 0.2, 1.0);
        assert_eq!(
            one_step_expected_lyapunov(&s, &f, &psi, &cfg1, &probe.x_star, &probe.h_star).unwrap(),
            direct
        );
    }

    #[test]
    fn optimal_probability_examples() {
        let info = |k: f64| SmoothnessInfo::new(1.0, 1.0 / k).unwrap();
        assert!((optimal_probability(&info(100.0)).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(optimal_probability(&info(1.0)).unwrap(), 1.0);
        assert!((optimal_probability(&info(1e4)).unwrap() - 0.01).abs() < 1e-15);
        assert!(optimal_probability(&SmoothnessInfo::new(1.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn exact_oracles_are_bitwise_gradients() {
        let f = Problem::Quadratic(QuadraticProblem::random(3, 10.0, 1).unwrap());
        let x = [0.1, 0.2, 0.3];
        let g = f.gradient(&x);
        assert_eq!(stochastic_gradient(&StochasticOracle::Exact, &f, &x, 0, 0).unwrap(), g);
        let zero = StochasticOracle::AdditiveGaussian { sigma: 0.0 };
        assert_eq!(stochastic_gradient(&zero, &f, &x, 0, 0).unwrap(), g);
    }

    #[test]
    fn gaussian_oracle_is_unbiased() {
        let f = Problem::Quadratic(QuadraticProblem::random(3, 10.0, 1).unwrap());
        let x = [0.1, 0.2, 0.3];
        let g = f.gradient(&x);
        let sigma = 0.7;
        let oracle = StochasticOracle::AdditiveGaussian { sigma };
        let draws = 100_000;
        let mut mean = [0.0; 3];
        let mut second = 0.0;
        for k in 0..draws {
            let s = stochastic_gradient(&oracle, &f, &x, 5, k).unwrap();
            second += dist_sq(&s, &g);
            for (m, v) in mean.iter_mut().zip(&s) {
                *m += v / draws as f64;
            }
        }
        for (m, gi) in mean.iter().zip(&g) {
            assert!((m - gi).abs() <= 4.0 * sigma / (draws as f64).sqrt());
        }
        // total variance is sigma^2
        assert!((second / draws as f64 / (sigma * sigma) - 1.0).abs() < 0.02);
    }

    #[test]
    fn full_minibatch_equals_gradient() {
        let (data, labels) = LogisticProblem::synthetic(30, 4, 0.1, 1).unwrap();
        let f = Problem::Logistic(LogisticProblem::new(data, labels, 0.01).unwrap());
        let x = [0.2, -0.1, 0.4, 0.0];
        let full = StochasticOracle::Minibatch { batch: 30 };
        assert_eq!(stochastic_gradient(&full, &f, &x, 3, 9).unwrap(), f.gradient(&x));
        let info = smoothness_constants(&f).unwrap();
        let xs = f.minimizer().unwrap();
        let es = expected_smoothness_constants(&full, &f, &info, Some(&xs)).unwrap();
        assert_eq!(es.c, Some(0.0));
        let single = StochasticOracle::Minibatch { batch: 1 };
        let es = expected_smoothness_constants(&single, &f, &info, None).unwrap();
        let l_max = f.sample_smoothness().unwrap().into_iter().fold(0.0, f64::max);
        assert!((es.a - l_max).abs() < 1e-12);
        assert_eq!(es.c, None);
        assert!(StochasticOracle::Minibatch { batch: 31 }.validate(&f).is_err());
    }

    #[test]
    fn expected_smoothness_examples() {
        let f = quad(&[10.0, 1.0], &[0.0, 0.0]);
        let info = smoothness_constants(&f).unwrap();
        let es = expected_smoothness_constants(&StochasticOracle::Exact, &f, &info, None).unwrap();
        assert_eq!(es, ExpectedSmoothness { a: 10.0, c: Some(0.0) });
        let es =
            expected_smoothness_constants(&StochasticOracle::AdditiveGaussian { sigma: 2.0 }, &f, &info, None).unwrap();
        assert_eq!(es.c, Some(4.0));
    }

    #[test]
    fn parameter_rule_examples() {
        let info = SmoothnessInfo::new(4.0, 1.0).unwrap();
        let es = ExpectedSmoothness { a: 4.0, c: Some(8.0) };
        let r = sproxskip_parameter_rule(&info, &es, 0.5, 1.0).unwrap();
        assert_eq!(r.gamma, 0.03125);
        assert_eq!(r.p, 0.03125f64.sqrt());
        // max(4, 2*8/(0.5)) * ln(4) = 32 ln 4
        assert_eq!(r.iterations, (32.0 * 4.0f64.ln()).ceil() as u64);

        let info = SmoothnessInfo::new(1.0, 0.01).unwrap();
        let es = ExpectedSmoothness { a: 1.0, c: Some(0.0) };
        let r = sproxskip_parameter_rule(&info, &es, 1e-3, 1.0).unwrap();
        assert_eq!(r.gamma, 1.0);
        assert!((r.p - 0.1).abs() < 1e-15);
        assert_eq!(r.iterations, (100.0 * 2000.0f64.ln()).ceil() as u64);

        let es = ExpectedSmoothness { a: 1.0, c: None };
        assert_eq!(sproxskip_parameter_rule(&info, &es, 1e-3, 1.0).unwrap().gamma, 1.0);
        let es = ExpectedSmoothness { a: 1.0, c: Some(1.0) };
        assert_eq!(sproxskip_parameter_rule(&info, &es, 1e-6, 1.0).unwrap().gamma, 0.5e-8);
    }

    #[test]
    fn exact_oracle_run_matches_proxskip() {
        let f = Problem::Quadratic(QuadraticProblem::random(3, 20.0, 4).unwrap());
        let psi = ProxOperator::l1(0.01).unwrap();
        let cfg = ProxSkipConfig::new(0.5, 0.3, 200, 8).unwrap();
        let ctl = RunControl::default();
        let (a, sa) = run_proxskip(&f, &psi, &cfg, vec![1.0; 3], vec![0.0; 3], None, &ctl).unwrap();
        let (b, sb) = run_sproxskip(
            &f,
            &psi,
            &StochasticOracle::Exact,
            &cfg,
            vec![1.0; 3],
            vec![0.0; 3],
            None,
            &ctl,
        )
        .unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn composite_reference_is_a_fixed_point() {
        let f = Problem::Quadratic(QuadraticProblem::random(3, 10.0, 4).unwrap());
        let psi = ProxOperator::l1(0.3).unwrap();
        let pr = Probe::composite(&f, &psi, 1.0).unwrap();
        let next = prox_gd_step(&f, &psi, 1.0, &pr.x_star).unwrap();
        assert!(dist_sq(&next, &pr.x_star) < 1e-28);
    }

    fn random_state(seed: u64, d: usize, scale: f64) -> SolverState {
        let mut rng = StreamRng::new(seed, 50, 0);
        let mut v = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        };
        let x: Vec<f64> = (0..d).map(|_| v()).collect();
        let h: Vec<f64> = (0..d).map(|_| v()).collect();
        SolverState::new(x, h).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn one_step_contraction_with_regularizer(seed in 0u64..10_000, p in 0.05..1.0f64, w in 0.0..0.5f64) {
            let f = Problem::Quadratic(QuadraticProblem::random(4, 30.0, 1).unwrap());
            let info = smoothness_constants(&f).unwrap();
            let psi = ProxOperator::l1(w).unwrap();
            let probe = Probe::composite(&f, &psi, info.l).unwrap();
            let gamma = 1.0 / info.l;
            let cfg = ProxSkipConfig::new(gamma, p, 1, seed).unwrap();
            let s = random_state(seed, 4, 2.0);
            let psi_t = lyapunov(&s.x, &s.h, &probe.x_star, &probe.h_star, gamma, p);
            let next = one_step_expected_lyapunov(&s, &f, &psi, &cfg, &probe.x_star, &probe.h_star).unwrap();
            prop_assert!(next <= (1.0 - contraction_rate(gamma, info.mu, p)) * psi_t + 1e-12);
        }

        #[test]
        fn control_variate_constant_between_prox_steps(seed in 0u64..1000) {
            let f = Problem::Quadratic(QuadraticProblem::random(3, 10.0, 2).unwrap());
            let psi = ProxOperator::l1(0.05).unwrap();
            let cfg = ProxSkipConfig::new(0.5, 0.3, 1, seed).unwrap();
            let mut s = SolverState::at(vec![1.0, -1.0, 0.5]);
            for _ in 0..50 {
                let h = s.h.clone();
                let theta = proxskip_step(&mut s, &f, &psi, &cfg, None).unwrap();
                if !theta {
                    prop_assert_eq!(&s.h, &h);
                }
            }
        }

        #[test]
        fn gradient_step_contracts_towards_optimum(seed in 0u64..10_000) {
            let f = Problem::Quadratic(QuadraticProblem::random(5, 100.0, 3).unwrap());
            let info = smoothness_constants(&f).unwrap();
            let xs = f.minimizer().unwrap();
            let gamma = 1.0 / info.l;
            let x = random_state(seed, 5, 3.0).x;
            let w = sub(&x, &f.gradient(&x).iter().map(|g| gamma * g).collect::<Vec<_>>());
            let ws = sub(&xs, &f.gradient(&xs).iter().map(|g| gamma * g).collect::<Vec<_>>());
            let lhs = dist_sq(&w, &ws);
            let rhs = (1.0 - gamma * info.mu) * dist_sq(&x, &xs);
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }
    }
}
