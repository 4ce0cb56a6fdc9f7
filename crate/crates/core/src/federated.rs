//! In-process federated simulation: Scaffnew and the LocalGD, Scaffold and
//! GD baselines.
//!
//! Client iterates are stored stacked and client-major (`n` blocks of
//! length `d`). A communication round is an averaging of the blocks, done
//! in ascending client order so results do not depend on scheduling.

use crate::error::{Error, Result};
use crate::numerics::{check_dim, dist_sq, mean_of_blocks};
use crate::problems::{Federation, Objective, Problem};
use crate::record::{max_magnitude, Recorder, RunControl, RunRecord, RunRow, RunStatus};
use crate::rng::coin;
use crate::solvers::{stochastic_gradient_into, Probe, ProxSkipConfig, StochasticOracle};

/// Per-client iterates and control variates, plus counters.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedState {
    pub clients: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub t: u64,
    pub comm_rounds: u64,
    pub local_grad_steps: u64,
}

impl FederatedState {
    /// Every client at `x0` with zero control variate.
    pub fn new(clients: usize, x0: &[f64]) -> Self {
        Self {
            clients,
            dim: x0.len(),
            x: x0.repeat(clients),
            h: vec![0.0; clients * x0.len()],
            t: 0,
            comm_rounds: 0,
            local_grad_steps: 0,
        }
    }

    /// Explicit stacked iterates and control variates; the control
    /// variates must sum to zero across clients.
    pub fn with_control_variates(clients: usize, x: Vec<f64>, h: Vec<f64>) -> Result<Self> {
        if clients == 0 || !x.len().is_multiple_of(clients) || x.is_empty() {
            return Err(Error::argument("stacked iterate does not split into client blocks"));
        }
        check_dim("stacked control variates", x.len(), h.len())?;
        let dim = x.len() / clients;
        let mut sum = vec![0.0; dim];
        for hi in h.chunks_exact(dim) {
            for (s, v) in sum.iter_mut().zip(hi) {
                *s += v;
            }
        }
        if sum.iter().any(|s| s.abs() > 1e-9 * clients as f64) {
            return Err(Error::argument("initial control variates must sum to zero"));
        }
        Ok(Self {
            clients,
            dim,
            x,
            h,
            t: 0,
            comm_rounds: 0,
            local_grad_steps: 0,
        })
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn control(&self, i: usize) -> &[f64] {
        &self.h[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of_blocks(self.x.chunks_exact(self.dim))
    }

    /// `1/n sum_i |x_i - mean|^2`.
    pub fn dispersion(&self) -> f64 {
        dispersion(&self.x, self.dim)
    }
}

pub(crate) fn dispersion(x: &[f64], dim: usize) -> f64 {
    let mean = mean_of_blocks(x.chunks_exact(dim));
    let n = x.len() / dim;
    x.chunks_exact(dim).map(|b| dist_sq(b, &mean)).sum::<f64>() / n as f64
}

/// Consensus optimum `x*` and the client gradients `grad f_i(x*)`, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedProbe {
    pub x_star: Vec<f64>,
    pub h_star: Vec<f64>,
}

impl FederatedProbe {
    pub fn new(fed: &Federation) -> Result<Self> {
        let x_star = fed.minimizer()?;
        let h_star = fed.clients().iter().flat_map(|f| f.gradient(&x_star)).collect();
        Ok(Self { x_star, h_star })
    }

    /// The stacked optimum `(x*, ..., x*)`.
    pub fn stacked_x_star(&self, clients: usize) -> Vec<f64> {
        self.x_star.repeat(clients)
    }

    /// Probe for the stacked single-process view of the same problem.
    pub fn stacked(&self, clients: usize) -> Probe {
        Probe {
            x_star: self.stacked_x_star(clients),
            h_star: self.h_star.clone(),
        }
    }
}

/// Pre-drawn communication coins.
#[derive(Debug, Clone, PartialEq)]
pub struct CoinSchedule {
    pub p: f64,
    pub seed: u64,
    pub coins: Vec<bool>,
}

impl CoinSchedule {
    pub fn communications(&self) -> usize {
        self.coins.iter().filter(|c| **c).count()
    }
}

/// Coin `t` is `uniform(seed, t) < p`, the same draw ProxSkip uses, so a
/// schedule can be shared between paired runs.
pub fn make_coin_schedule(p: f64, iterations: u64, seed: u64) -> Result<CoinSchedule> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::argument(format!("probability must be in (0, 1], got {p}")));
    }
    Ok(CoinSchedule {
        p,
        seed,
        coins: (0..iterations).map(|t| coin(seed, t, p)).collect(),
    })
}

fn client_gradients(fed: &Federation, x: &[f64], oracle: &StochasticOracle, seed: u64, t: u64, out: &mut [f64]) {
    let n = fed.num_clients() as u64;
    let d = fed.dim();
    for (i, (xi, gi)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        stochastic_gradient_into(oracle, fed.client(i), xi, seed, t * n + i as u64, gi);
    }
}

/// One Scaffnew round.
///
/// Every client takes `x_hat_i = x_i - gamma (g_i - h_i)`. On a
/// communication round the server averages `x_hat_i - (gamma/p) h_i` and
/// clients correct `h_i += (p/gamma)(x_i' - x_hat_i)`; since the `h_i` sum
/// to zero this is the average of the `x_hat_i`.
pub fn scaffnew_round(
    state: &mut FederatedState,
    fed: &Federation,
    gamma: f64,
    p: f64,
    theta: bool,
    oracle: &StochasticOracle,
    seed: u64,
) -> Result<()> {
    check_dim("scaffnew_round", fed.num_clients() * fed.dim(), state.x.len())?;
    let mut g = vec![0.0; state.x.len()];
    client_gradients(fed, &state.x, oracle, seed, state.t, &mut g);
    for ((xi, gi), hi) in state.x.iter_mut().zip(&g).zip(&state.h) {
        *xi -= gamma * (gi - hi);
    }
    if theta {
        let s = gamma / p;
        let shifted: Vec<f64> = state.x.iter().zip(&state.h).map(|(xi, hi)| xi - s * hi).collect();
        let mean = mean_of_blocks(shifted.chunks_exact(state.dim));
        let r = p / gamma;
        for (xb, hb) in state
            .x
            .chunks_exact_mut(state.dim)
            .zip(state.h.chunks_exact_mut(state.dim))
        {
            for ((xi, hi), mi) in xb.iter_mut().zip(hb.iter_mut()).zip(&mean) {
                *hi += r * (mi - *xi);
                *xi = *mi;
            }
        }
        state.comm_rounds += 1;
    }
    state.t += 1;
    state.local_grad_steps += state.clients as u64;
    Ok(())
}

fn stacked_lyapunov(state: &FederatedState, probe: &FederatedProbe, gamma: f64, p: f64) -> f64 {
    let r = gamma / p;
    let xs: f64 = state.x.chunks_exact(state.dim).map(|b| dist_sq(b, &probe.x_star)).sum();
    xs + r * r * dist_sq(&state.h, &probe.h_star)
}

fn federated_row(state: &FederatedState, probe: Option<&FederatedProbe>, lyap: Option<(f64, f64)>) -> RunRow {
    RunRow {
        t: state.t,
        comm_rounds: state.comm_rounds,
        grad_evals: state.local_grad_steps,
        dist_sq: probe.map(|pr| dist_sq(&state.mean(), &pr.x_star)),
        lyapunov: probe.zip(lyap).map(|(pr, (g, p))| stacked_lyapunov(state, pr, g, p)),
        dispersion: Some(state.dispersion()),
    }
}

/// Scaffnew from every client at `x0` with `h_i = 0`.
pub fn run_scaffnew(
    fed: &Federation,
    cfg: &ProxSkipConfig,
    oracle: &StochasticOracle,
    x0: &[f64],
    probe: Option<&FederatedProbe>,
    control: &RunControl,
) -> Result<(RunRecord, FederatedState)> {
    check_dim("run_scaffnew", fed.dim(), x0.len())?;
    for c in fed.clients() {
        oracle.validate(c)?;
    }
    let schedule = make_coin_schedule(cfg.p, cfg.iterations, cfg.seed)?;
    let mut state = FederatedState::new(fed.num_clients(), x0);
    let lyap = Some((cfg.gamma, cfg.p));
    let mut rec = Recorder::new("scaffnew", cfg.seed, *control);
    if let Some(status) = rec.observe(federated_row(&state, probe, lyap), max_magnitude(&state.x)) {
        return Ok((rec.finish(status), state));
    }
    for &theta in &schedule.coins {
        scaffnew_round(&mut state, fed, cfg.gamma, cfg.p, theta, oracle, cfg.seed)?;
        if let Some(status) = rec.observe(federated_row(&state, probe, lyap), max_magnitude(&state.x)) {
            return Ok((rec.finish(status), state));
        }
    }
    Ok((rec.finish(RunStatus::Completed), state))
}

/// Gradient descent on the global objective; every step is one round.
pub fn run_gd_baseline(
    problem: &Problem,
    gamma: f64,
    iterations: u64,
    x0: &[f64],
    probe: Option<&Probe>,
    control: &RunControl,
) -> Result<(RunRecord, Vec<f64>)> {
    check_dim("run_gd_baseline", problem.dim(), x0.len())?;
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
    let mut rec = Recorder::new("gd", 0, *control);
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x.len()];
    if let Some(status) = rec.observe(row(&x, 0), max_magnitude(&x)) {
        return Ok((rec.finish(status), x));
    }
    for t in 1..=iterations {
        problem.gradient_into(&x, &mut g);
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= gamma * gi;
        }
        if let Some(status) = rec.observe(row(&x, t), max_magnitude(&x)) {
            return Ok((rec.finish(status), x));
        }
    }
    Ok((rec.finish(RunStatus::Completed), x))
}

/// Shared parameters of the fixed-schedule baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStepsConfig {
    pub gamma: f64,
    /// Local steps per round.
    pub tau: u64,
    pub rounds: u64,
    pub seed: u64,
}

impl LocalStepsConfig {
    pub fn new(gamma: f64, tau: u64, rounds: u64, seed: u64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::argument(format!("stepsize must be > 0, got {gamma}")));
        }
        if tau == 0 {
            return Err(Error::argument("need at least one local step per round"));
        }
        Ok(Self {
            gamma,
            tau,
            rounds,
            seed,
        })
    }
}

fn baseline_row(x: &[f64], dim: usize, t: u64, comm: u64, grads: u64, probe: Option<&FederatedProbe>) -> RunRow {
    RunRow {
        t,
        comm_rounds: comm,
        grad_evals: grads,
        dist_sq: probe.map(|pr| dist_sq(&mean_of_blocks(x.chunks_exact(dim)), &pr.x_star)),
        lyapunov: None,
        dispersion: Some(dispersion(x, dim)),
    }
}

fn average_blocks(x: &mut [f64], dim: usize) {
    let mean = mean_of_blocks(x.chunks_exact(dim));
    for b in x.chunks_exact_mut(dim) {
        b.copy_from_slice(&mean);
    }
}

/// LocalGD: `tau` plain local steps, then average. Logs every local step.
pub fn run_local_gd(
    fed: &Federation,
    cfg: &LocalStepsConfig,
    oracle: &StochasticOracle,
    x0: &[f64],
    probe: Option<&FederatedProbe>,
    control: &RunControl,
) -> Result<(RunRecord, Vec<f64>)> {
    check_dim("run_local_gd", fed.dim(), x0.len())?;
    let (n, d) = (fed.num_clients(), fed.dim());
    let mut x = x0.repeat(n);
    let mut g = vec![0.0; x.len()];
    let mut rec = Recorder::new("local-gd", cfg.seed, *control);
    let (mut t, mut comm) = (0u64, 0u64);
    if let Some(status) = rec.observe(baseline_row(&x, d, 0, 0, 0, probe), max_magnitude(&x)) {
        return Ok((rec.finish(status), x));
    }
    for _ in 0..cfg.rounds {
        for k in 0..cfg.tau {
            client_gradients(fed, &x, oracle, cfg.seed, t, &mut g);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= cfg.gamma * gi;
            }
            t += 1;
            if k + 1 == cfg.tau {
                average_blocks(&mut x, d);
                comm += 1;
            }
            let row = baseline_row(&x, d, t, comm, t * n as u64, probe);
            if let Some(status) = rec.observe(row, max_magnitude(&x)) {
                return Ok((rec.finish(status), x));
            }
        }
    }
    Ok((rec.finish(RunStatus::Completed), x))
}

/// Scaffold with option-II control variates, full participation and global
/// stepsize 1. Local steps use `grad f_i(y_i) - c_i + c`; after `tau`
/// steps `c_i <- c_i - c + (x - y_i)/(tau gamma)`, and the server sets `x`
/// and `c` to the client means. Logs every local step.
pub fn run_scaffold(
    fed: &Federation,
    cfg: &LocalStepsConfig,
    oracle: &StochasticOracle,
    x0: &[f64],
    probe: Option<&FederatedProbe>,
    control: &RunControl,
) -> Result<(RunRecord, Vec<f64>)> {
    check_dim("run_scaffold", fed.dim(), x0.len())?;
    let (n, d) = (fed.num_clients(), fed.dim());
    let mut server = x0.to_vec();
    let mut c = vec![0.0; d];
    let mut ci = vec![0.0; n * d];
    let mut y = server.repeat(n);
    let mut g = vec![0.0; y.len()];
    let mut rec = Recorder::new("scaffold", cfg.seed, *control);
    let (mut t, mut comm) = (0u64, 0u64);
    if let Some(status) = rec.observe(baseline_row(&y, d, 0, 0, 0, probe), max_magnitude(&y)) {
        return Ok((rec.finish(status), y));
    }
    let inv = 1.0 / (cfg.tau as f64 * cfg.gamma);
    for _ in 0..cfg.rounds {
        for k in 0..cfg.tau {
            client_gradients(fed, &y, oracle, cfg.seed, t, &mut g);
            for ((yb, gb), cb) in y.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(ci.chunks_exact(d)) {
                for (((yv, gv), cv), cg) in yb.iter_mut().zip(gb).zip(cb).zip(&c) {
                    *yv -= cfg.gamma * (gv - cv + cg);
                }
            }
            t += 1;
            if k + 1 == cfg.tau {
                for (yb, cb) in y.chunks_exact(d).zip(ci.chunks_exact_mut(d)) {
                    for (((cv, cg), xs), yv) in cb.iter_mut().zip(&c).zip(&server).zip(yb) {
                        *cv = *cv - cg + (xs - yv) * inv;
                    }
                }
                server = mean_of_blocks(y.chunks_exact(d));
                c = mean_of_blocks(ci.chunks_exact(d));
                for yb in y.chunks_exact_mut(d) {
                    yb.copy_from_slice(&server);
                }
                comm += 1;
            }
            let row = baseline_row(&y, d, t, comm, t * n as u64, probe);
            if let Some(status) = rec.observe(row, max_magnitude(&y)) {
                return Ok((rec.finish(status), y));
            }
        }
    }
    Ok((rec.finish(RunStatus::Completed), y))
}
