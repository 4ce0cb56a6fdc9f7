//! Decentralized optimization over a graph.
//!
//! Nodes only talk to their neighbours through a mixing matrix `W`.
//! Decentralized Scaffnew replaces Scaffnew's exact averaging with one
//! gossip step. SplitSkip solves `min f(x) + psi(Lx)` by a primal-dual
//! iteration that skips the dual prox (the communication) with probability
//! `1 - p`; with `L = sqrt(I - W)` and `psi` the indicator of `{0}` it
//! reproduces decentralized Scaffnew through `h = -L^T y`.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{dispersion, FederatedState};
use crate::numerics::{
    check_dim, dist_sq, inf_norm, matrix_sqrt_psd, mean_of_blocks, norm, symmetric_eigen, SymMatrix,
};
use crate::problems::{Federation, Objective, SmoothnessInfo};
use crate::prox::{prox_conjugate, ProxOperator};
use crate::record::{max_magnitude, Recorder, RunControl, RunRecord, RunRow, RunStatus};
use crate::rng::coin;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Topology {
    Ring {
        n: usize,
    },
    Complete {
        n: usize,
    },
    /// Node 0 is the hub.
    Star {
        n: usize,
    },
    /// 4-neighbour grid, nodes numbered row-major.
    Grid {
        rows: usize,
        cols: usize,
    },
    Custom {
        n: usize,
        edges: Vec<(usize, usize)>,
    },
}

impl Topology {
    pub fn nodes(&self) -> usize {
        match *self {
            Topology::Ring { n } | Topology::Complete { n } | Topology::Star { n } => n,
            Topology::Grid { rows, cols } => rows * cols,
            Topology::Custom { n, .. } => n,
        }
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted and deduplicated.
    pub fn edges(&self) -> Result<Vec<(usize, usize)>> {
        let n = self.nodes();
        if n < 2 {
            return Err(Error::argument(format!("a topology needs at least 2 nodes, got {n}")));
        }
        let mut set = BTreeSet::new();
        let mut add = |a: usize, b: usize| {
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        };
        match self {
            Topology::Ring { .. } => (0..n).for_each(|i| add(i, (i + 1) % n)),
            Topology::Complete { .. } => {
                for i in 0..n {
                    for j in i + 1..n {
                        add(i, j);
                    }
                }
            }
            Topology::Star { .. } => (1..n).for_each(|i| add(0, i)),
            Topology::Grid { rows, cols } => {
                for r in 0..*rows {
                    for c in 0..*cols {
                        let i = r * cols + c;
                        if c + 1 < *cols {
                            add(i, i + 1);
                        }
                        if r + 1 < *rows {
                            add(i, i + cols);
                        }
                    }
                }
            }
            Topology::Custom { edges, .. } => {
                for &(a, b) in edges {
                    if a >= n || b >= n {
                        return Err(Error::argument(format!("edge ({a}, {b}) out of range")));
                    }
                    if a == b {
                        return Err(Error::argument(format!("self-loop at node {a}")));
                    }
                    add(a, b);
                }
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        check_connected(n, &edges)?;
        Ok(edges)
    }
}

fn check_connected(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if !std::mem::replace(&mut seen[u], true) {
                queue.push_back(u);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(v) => Err(Error::argument(format!("graph is disconnected (node {v} unreachable)"))),
        None => Ok(()),
    }
}

/// Symmetric, doubly stochastic, PSD gossip matrix and its spectral data.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: SymMatrix,
    eigenvalues: Vec<f64>,
    delta: f64,
    sqrt_laplacian: SymMatrix,
    sqrt_laplacian_pinv: SymMatrix,
}

impl MixingMatrix {
    /// Wraps a user-supplied `W`, checking the assumptions.
    pub fn from_matrix(w: SymMatrix) -> Result<Self> {
        let n = w.dim();
        if n < 2 {
            return Err(Error::argument("mixing matrix needs at least 2 nodes"));
        }
        for i in 0..n {
            let s: f64 = w.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::argument(format!("row {i} of W sums to {s}, not 1")));
            }
        }
        let eig = symmetric_eigen(&w)?;
        let min = *eig.values.last().unwrap();
        if min < -1e-10 {
            return Err(Error::argument(format!("W is not PSD (min eigenvalue {min:e})")));
        }
        let delta = 1.0 - eig.values[1];
        if !(delta > 1e-12) {
            return Err(Error::argument("W has no spectral gap (disconnected graph)"));
        }
        let laplacian = SymMatrix::identity(n).combine(1.0, &w, -1.0);
        let sqrt_laplacian = matrix_sqrt_psd(&laplacian)?;
        // eigenvalues of I - W are 1 - lambda_k(W) on the same eigenvectors
        let inv: Vec<f64> = eig
            .values
            .iter()
            .map(|l| {
                let v = (1.0 - l).max(0.0);
                if v > 1e-12 {
                    1.0 / v.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let sqrt_laplacian_pinv = SymMatrix::from_spectrum(&inv, &eig.vectors);
        Ok(Self {
            w,
            eigenvalues: eig.values,
            delta,
            sqrt_laplacian,
            sqrt_laplacian_pinv,
        })
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.w
    }

    pub fn nodes(&self) -> usize {
        self.w.dim()
    }

    /// `1 - lambda_2(W)`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `sqrt(I - W)`.
    pub fn sqrt_laplacian(&self) -> &SymMatrix {
        &self.sqrt_laplacian
    }

    /// Pseudo-inverse of `sqrt(I - W)`.
    pub fn sqrt_laplacian_pinv(&self) -> &SymMatrix {
        &self.sqrt_laplacian_pinv
    }

    /// `(W x)_i = sum_j W_ij x_j` on stacked blocks of length `dim`.
    pub fn mix(&self, x: &[f64], dim: usize) -> Vec<f64> {
        BlockOperator::new(self.w.clone(), dim).apply(x)
    }
}

/// Lazy Metropolis weights: `M_ij = 1/(1 + max(deg_i, deg_j))` on edges,
/// diagonal completing rows to 1, and `W = (I + M)/2`.
pub fn mixing_matrix(top: &Topology) -> Result<MixingMatrix> {
    let edges = top.edges()?;
    let n = top.nodes();
    let mut deg = vec![0usize; n];
    for &(a, b) in &edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut m = vec![0.0; n * n];
    for &(a, b) in &edges {
        let v = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        m[a * n + b] = v;
        m[b * n + a] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[i * n + j]).sum();
        m[i * n + i] = 1.0 - off;
    }
    let w: Vec<f64> = (0..n * n)
        .map(|k| {
            let id = if k / n == k % n { 1.0 } else { 0.0 };
            0.5 * (id + m[k])
        })
        .collect();
    MixingMatrix::from_matrix(SymMatrix::from_row_major(n, w)?)
}

/// Linear operator with an adjoint.
pub trait LinearMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::argument("dense matrix shape mismatch"));
        }
        Ok(Self { rows, cols, data })
    }
}

impl LinearMap for DenseMatrix {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn output_dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }
}

/// `M (x) I_d`: a symmetric node-level matrix acting on stacked blocks.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    mat: SymMatrix,
    dim: usize,
}

impl BlockOperator {
    pub fn new(mat: SymMatrix, dim: usize) -> Self {
        Self { mat, dim }
    }
}

impl LinearMap for BlockOperator {
    fn input_dim(&self) -> usize {
        self.mat.dim() * self.dim
    }

    fn output_dim(&self) -> usize {
        self.input_dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (n, d) = (self.mat.dim(), self.dim);
        let mut out = vec![0.0; n * d];
        for (i, oi) in out.chunks_exact_mut(d).enumerate() {
            for (j, xj) in x.chunks_exact(d).enumerate() {
                let a = self.mat.get(i, j);
                if a != 0.0 {
                    for (o, v) in oi.iter_mut().zip(xj) {
                        *o += a * v;
                    }
                }
            }
        }
        out
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

/// Stepsize, dual stepsize `tau`, communication probability, horizon, seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecentralizedConfig {
    pub gamma: f64,
    pub tau: f64,
    pub p: f64,
    pub iterations: u64,
    pub seed: u64,
}

impl DecentralizedConfig {
    /// Requires `gamma tau / p <= 1`, so a gossip step never moves a node
    /// past its neighbours' average.
    pub fn new(gamma: f64, tau: f64, p: f64, iterations: u64, seed: u64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::argument(format!("stepsize must be > 0, got {gamma}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::argument(format!("dual stepsize must be > 0, got {tau}")));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::argument(format!("probability must be in (0, 1], got {p}")));
        }
        if gamma * tau / p > 1.0 + 1e-12 {
            return Err(Error::argument(format!(
                "gamma * tau / p = {} exceeds 1",
                gamma * tau / p
            )));
        }
        Ok(Self {
            gamma,
            tau,
            p,
            iterations,
            seed,
        })
    }

    /// `tau = p / gamma`: each communication is a full gossip step.
    pub fn full_mixing(gamma: f64, p: f64, iterations: u64, seed: u64) -> Result<Self> {
        Self::new(gamma, p / gamma, p, iterations, seed)
    }
}

/// `p = min(1, sqrt(1/(delta kappa)))`.
pub fn decentralized_optimal_probability(info: &SmoothnessInfo, delta: f64) -> Result<f64> {
    if !(info.mu > 0.0) || !(delta > 0.0) {
        return Err(Error::argument("need mu > 0 and delta > 0"));
    }
    Ok((1.0 / (delta * info.kappa)).sqrt().min(1.0))
}

/// Per-step contraction `min(gamma mu, p gamma tau delta)`.
pub fn decentralized_rate(cfg: &DecentralizedConfig, mu: f64, delta: f64) -> f64 {
    (cfg.gamma * mu).min(cfg.p * cfg.gamma * cfg.tau * delta)
}

/// One decentralized Scaffnew step with exact local gradients.
///
/// `x_hat_i = x_i - gamma (grad f_i(x_i) - h_i)`; on a communication step
/// `x_i' = (1 - c) x_hat_i + c sum_j W_ij x_hat_j` with `c = gamma tau / p`,
/// and `h_i += (p/gamma)(x_i' - x_hat_i)`.
pub fn decentralized_scaffnew_round(
    state: &mut FederatedState,
    fed: &Federation,
    mixing: &MixingMatrix,
    gamma: f64,
    tau: f64,
    p: f64,
    theta: bool,
) -> Result<()> {
    let (n, d) = (fed.num_clients(), fed.dim());
    check_dim("decentralized_scaffnew_round", n * d, state.x.len())?;
    check_dim("mixing matrix nodes", n, mixing.nodes())?;
    let c = gamma * tau / p;
    if c > 1.0 + 1e-12 {
        return Err(Error::argument(format!("gamma * tau / p = {c} exceeds 1")));
    }
    let g = fed.stacked().gradient(&state.x);
    for ((xi, gi), hi) in state.x.iter_mut().zip(&g).zip(&state.h) {
        *xi -= gamma * (gi - hi);
    }
    if theta {
        let mixed = mixing.mix(&state.x, d);
        let r = p / gamma;
        for ((xi, hi), mi) in state.x.iter_mut().zip(state.h.iter_mut()).zip(&mixed) {
            let next = (1.0 - c) * *xi + c * mi;
            *hi += r * (next - *xi);
            *xi = next;
        }
        state.comm_rounds += 1;
    }
    state.t += 1;
    state.local_grad_steps += n as u64;
    Ok(())
}

/// Optimum, dual optimum and the operators needed for the Lyapunov value.
#[derive(Debug, Clone)]
pub struct DecentralizedProbe {
    pub x_star: Vec<f64>,
    /// Stacked `grad f_i(x*)`.
    pub h_star: Vec<f64>,
    /// `y* = -L^+ grad F(x*)`, the dual optimum in `range(L)`.
    pub y_star: Vec<f64>,
    l_pinv: BlockOperator,
}

impl DecentralizedProbe {
    pub fn new(fed: &Federation, mixing: &MixingMatrix) -> Result<Self> {
        check_dim("mixing matrix nodes", fed.num_clients(), mixing.nodes())?;
        let x_star = fed.minimizer()?;
        let h_star: Vec<f64> = fed.clients().iter().flat_map(|f| f.gradient(&x_star)).collect();
        let l_pinv = BlockOperator::new(mixing.sqrt_laplacian_pinv().clone(), fed.dim());
        let y_star: Vec<f64> = l_pinv.apply(&h_star).into_iter().map(|v| -v).collect();
        Ok(Self {
            x_star,
            h_star,
            y_star,
            l_pinv,
        })
    }

    /// Dual variable matching a control variate, `y = -L^+ h`.
    pub fn dual_of(&self, h: &[f64]) -> Vec<f64> {
        self.l_pinv.apply(h).into_iter().map(|v| -v).collect()
    }
}

/// `1/n sum_i |x_i - x*|^2 + gamma/(p tau) * 1/n sum_i |y_i - y*_i|^2`.
pub fn decentralized_lyapunov(
    x: &[f64],
    y: &[f64],
    x_star: &[f64],
    y_star: &[f64],
    gamma: f64,
    p: f64,
    tau: f64,
) -> f64 {
    let d = x_star.len();
    let n = (x.len() / d) as f64;
    let xs: f64 = x.chunks_exact(d).map(|b| dist_sq(b, x_star)).sum();
    (xs + gamma / (p * tau) * dist_sq(y, y_star)) / n
}

/// Upper bound on the initial Lyapunov value when `y_0 = 0`:
/// `1/n sum |x_0,i - x*|^2 + gamma/(p tau delta n) sum_i |grad f_i(x*)|^2`.
pub fn initial_lyapunov_bound(x0: &[f64], probe: &DecentralizedProbe, cfg: &DecentralizedConfig, delta: f64) -> f64 {
    let d = probe.x_star.len();
    let n = (x0.len() / d) as f64;
    let xs: f64 = x0.chunks_exact(d).map(|b| dist_sq(b, &probe.x_star)).sum();
    let hs: f64 = probe.h_star.iter().map(|v| v * v).sum();
    xs / n + cfg.gamma / (cfg.p * cfg.tau * delta * n) * hs
}

/// `|(I - L L^+)(y - y*)|`: the part of `y - y*` in the null space of
/// `L`, which is the block-constant subspace.
pub fn range_residual(y: &[f64], y_star: &[f64], dim: usize) -> f64 {
    let diff: Vec<f64> = y.iter().zip(y_star).map(|(a, b)| a - b).collect();
    let mean = mean_of_blocks(diff.chunks_exact(dim));
    let n = (y.len() / dim) as f64;
    norm(&mean) * n.sqrt()
}

/// Runs decentralized Scaffnew from every node at `x0` with `h = 0`.
pub fn run_decentralized_scaffnew(
    fed: &Federation,
    mixing: &MixingMatrix,
    cfg: &DecentralizedConfig,
    x0: &[f64],
    probe: Option<&DecentralizedProbe>,
    control: &RunControl,
) -> Result<(RunRecord, FederatedState)> {
    check_dim("run_decentralized_scaffnew", fed.dim(), x0.len())?;
    let mut state = FederatedState::new(fed.num_clients(), x0);
    let row = |s: &FederatedState| RunRow {
        t: s.t,
        comm_rounds: s.comm_rounds,
        grad_evals: s.local_grad_steps,
        dist_sq: probe.map(|pr| dist_sq(&s.mean(), &pr.x_star)),
        lyapunov: probe.map(|pr| {
            decentralized_lyapunov(
                &s.x,
                &pr.dual_of(&s.h),
                &pr.x_star,
                &pr.y_star,
                cfg.gamma,
                cfg.p,
                cfg.tau,
            )
        }),
        dispersion: Some(dispersion(&s.x, s.dim)),
    };
    let mut rec = Recorder::new("decentralized-scaffnew", cfg.seed, *control);
    if let Some(status) = rec.observe(row(&state), max_magnitude(&state.x)) {
        return Ok((rec.finish(status), state));
    }
    for t in 0..cfg.iterations {
        let theta = coin(cfg.seed, t, cfg.p);
        decentralized_scaffnew_round(&mut state, fed, mixing, cfg.gamma, cfg.tau, cfg.p, theta)?;
        if let Some(status) = rec.observe(row(&state), max_magnitude(&state.x)) {
            return Ok((rec.finish(status), state));
        }
    }
    Ok((rec.finish(RunStatus::Completed), state))
}

/// Primal iterate and dual variable of SplitSkip.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: u64,
    pub comm_rounds: u64,
    pub grad_calls: u64,
}

impl DualState {
    /// Starts with `y = 0`.
    pub fn new(x0: Vec<f64>, dual_dim: usize) -> Self {
        Self {
            x: x0,
            y: vec![0.0; dual_dim],
            t: 0,
            comm_rounds: 0,
            grad_calls: 0,
        }
    }
}

/// One SplitSkip step.
///
/// `x_hat = x - gamma (grad f(x) + L^T y)`; with the coin,
/// `y' = prox_{tau psi*}(y + tau L x_hat)` and
/// `x' = x_hat - (gamma/p) L^T (y' - y)`; otherwise `x' = x_hat`.
pub fn splitskip_step<F: Objective + ?Sized>(
    state: &mut DualState,
    f: &F,
    lmat: &dyn LinearMap,
    psi: &ProxOperator,
    gamma: f64,
    tau: f64,
    p: f64,
    theta: bool,
) -> Result<()> {
    check_dim("splitskip_step primal", f.dim(), state.x.len())?;
    check_dim("splitskip_step operator input", lmat.input_dim(), state.x.len())?;
    check_dim("splitskip_step dual", lmat.output_dim(), state.y.len())?;
    let g = f.gradient(&state.x);
    let lty = lmat.apply_transpose(&state.y);
    for ((xi, gi), li) in state.x.iter_mut().zip(&g).zip(&lty) {
        *xi -= gamma * (gi + li);
    }
    if theta {
        let lx = lmat.apply(&state.x);
        let v: Vec<f64> = state.y.iter().zip(&lx).map(|(yi, li)| yi + tau * li).collect();
        let y_next = prox_conjugate(psi, tau, &v)?;
        let dy: Vec<f64> = y_next.iter().zip(&state.y).map(|(a, b)| a - b).collect();
        let back = lmat.apply_transpose(&dy);
        let s = gamma / p;
        for (xi, bi) in state.x.iter_mut().zip(&back) {
            *xi -= s * bi;
        }
        state.y = y_next;
        state.comm_rounds += 1;
    }
    state.t += 1;
    state.grad_calls += 1;
    Ok(())
}

/// Runs decentralized Scaffnew and SplitSkip (with `L = sqrt(I - W)` and
/// `psi` the indicator of `{0}`) on the same coins and returns
/// `max_t max_i |x_i^Scaffnew - x_i^SplitSkip|_inf`.
pub fn equivalence_check(
    fed: &Federation,
    mixing: &MixingMatrix,
    cfg: &DecentralizedConfig,
    x0: &[f64],
) -> Result<f64> {
    let n = fed.num_clients();
    let mut a = FederatedState::new(n, x0);
    let lmat = BlockOperator::new(mixing.sqrt_laplacian().clone(), fed.dim());
    let mut b = DualState::new(x0.repeat(n), n * fed.dim());
    let stacked = fed.stacked();
    let psi = ProxOperator::IndicatorZero;
    let mut worst = 0.0f64;
    for t in 0..cfg.iterations {
        let theta = coin(cfg.seed, t, cfg.p);
        decentralized_scaffnew_round(&mut a, fed, mixing, cfg.gamma, cfg.tau, cfg.p, theta)?;
        splitskip_step(&mut b, &stacked, &lmat, &psi, cfg.gamma, cfg.tau, cfg.p, theta)?;
        let diff: Vec<f64> = a.x.iter().zip(&b.x).map(|(u, v)| u - v).collect();
        worst = worst.max(inf_norm(&diff));
    }
    Ok(worst)
}
