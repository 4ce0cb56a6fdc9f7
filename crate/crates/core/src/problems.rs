//! Smooth objectives and their client decompositions.
//!
//! Every problem is a finite sum over "samples": data rows for logistic
//! regression, quadratic components for quadratics. A [`ClientSplit`]
//! partitions samples among clients, and a client's objective is the mean
//! over its own samples (plus the full regularizer for logistic regression).

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{
    check_dim, cholesky_solve, dot, mean_of_blocks, norm, norm_sq, power_iteration, symmetric_eigen,
    symmetric_eigenvalues, SymMatrix,
};
use crate::rng::{StreamRng, GENERATOR_STREAM};

/// A differentiable objective on `R^dim`.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient_into(&self, x: &[f64], out: &mut [f64]);

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(x, &mut g);
        g
    }
}

/// Dense row-major sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DataMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::argument(format!(
                "data matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged data rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn select(&self, indices: &[usize]) -> DataMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DataMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `f(x) = 1/2 x^T A x - b^T x` with `A = mean_j A_j`, `b = mean_j b_j`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    components: Vec<(SymMatrix, Vec<f64>)>,
    a: SymMatrix,
    b: Vec<f64>,
}

impl QuadraticProblem {
    /// Single-component quadratic.
    pub fn new(a: SymMatrix, b: Vec<f64>) -> Result<Self> {
        Self::from_components(vec![(a, b)])
    }

    pub fn from_components(components: Vec<(SymMatrix, Vec<f64>)>) -> Result<Self> {
        let Some((first, _)) = components.first() else {
            return Err(Error::argument("quadratic needs at least one component"));
        };
        let d = first.dim();
        for (j, (a, b)) in components.iter().enumerate() {
            check_dim(&format!("quadratic component {j} matrix"), d, a.dim())?;
            check_dim(&format!("quadratic component {j} vector"), d, b.len())?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::argument(format!("component {j} has non-finite b")));
            }
            let min = *symmetric_eigenvalues(a)?.last().unwrap();
            if min < -1e-10 * a.max_abs().max(1.0) {
                return Err(Error::argument(format!(
                    "component {j} is not positive semidefinite (min eigenvalue {min:e})"
                )));
            }
        }
        let a = {
            let mean = mean_of_blocks(components.iter().map(|(a, _)| a.as_slice()));
            SymMatrix::symmetrize(d, mean)
        };
        let b = mean_of_blocks(components.iter().map(|(_, b)| b.as_slice()));
        Ok(Self { components, a, b })
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.a
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.b
    }

    pub fn components(&self) -> &[(SymMatrix, Vec<f64>)] {
        &self.components
    }

    /// Random instance with spectrum log-spaced in `[1/kappa, 1]`.
    pub fn random(dim: usize, kappa: f64, seed: u64) -> Result<Self> {
        let a = random_spd(dim, kappa, seed)?;
        let mut rng = StreamRng::new(seed, GENERATOR_STREAM + 1, 0);
        let b = (0..dim).map(|_| normal(&mut rng)).collect();
        Self::new(a, b)
    }
}

/// Regularized logistic regression,
/// `f(x) = 1/N sum_i log(1 + exp(-b_i a_i^T x)) + lambda/2 |x|^2`.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    data: DataMatrix,
    labels: Vec<f64>,
    lambda: f64,
}

impl LogisticProblem {
    pub fn new(data: DataMatrix, labels: Vec<f64>, lambda: f64) -> Result<Self> {
        check_dim("logistic labels", data.rows(), labels.len())?;
        if labels.iter().any(|&l| l != 1.0 && l != -1.0) {
            return Err(Error::argument("logistic labels must be +1 or -1"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::argument(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { data, labels, lambda })
    }

    /// Sets `lambda = factor * L0`, with `L0` the smoothness constant at `lambda = 0`.
    pub fn with_relative_lambda(data: DataMatrix, labels: Vec<f64>, factor: f64) -> Result<Self> {
        let unregularized = Self::new(data, labels, 0.0)?;
        let l0 = unregularized.loss_smoothness();
        let lambda = factor * l0;
        Self::new(unregularized.data, unregularized.labels, lambda)
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `lambda_max(A^T A) / (4 N)` by power iteration.
    fn loss_smoothness(&self) -> f64 {
        let d = self.data.cols();
        let apply = |v: &[f64]| {
            let mut out = vec![0.0; d];
            for i in 0..self.data.rows() {
                let row = self.data.row(i);
                let s = dot(row, v);
                for (o, a) in out.iter_mut().zip(row) {
                    *o += s * a;
                }
            }
            out
        };
        power_iteration(d, apply, POWER_ITERATIONS, POWER_TOL) / (4.0 * self.data.rows() as f64)
    }

    /// Synthetic data: Gaussian features, labels from a planted separator,
    /// each label flipped with probability `flip`.
    pub fn synthetic(samples: usize, dim: usize, flip: f64, seed: u64) -> Result<(DataMatrix, Vec<f64>)> {
        if samples == 0 || dim == 0 {
            return Err(Error::argument("synthetic logistic needs samples >= 1 and dim >= 1"));
        }
        let mut rng = StreamRng::new(seed, GENERATOR_STREAM + 2, 0);
        let w: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let mut data = Vec::with_capacity(samples * dim);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let row: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let mut label = if dot(&row, &w) >= 0.0 { 1.0 } else { -1.0 };
            if rng.next_f64() < flip {
                label = -label;
            }
            data.extend_from_slice(&row);
            labels.push(label);
        }
        Ok((DataMatrix::new(samples, dim, data)?, labels))
    }
}

const POWER_ITERATIONS: usize = 500;
const POWER_TOL: f64 = 1e-6;

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(QuadraticProblem),
    Logistic(LogisticProblem),
}

impl Problem {
    pub fn num_samples(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.components.len(),
            Problem::Logistic(l) => l.data.rows(),
        }
    }

    /// Labels used for label-sharded splits; quadratic components carry none.
    pub fn labels(&self) -> Option<&[f64]> {
        match self {
            Problem::Quadratic(_) => None,
            Problem::Logistic(l) => Some(&l.labels),
        }
    }

    /// The same objective restricted to a subset of samples, in the given order.
    pub fn restrict(&self, indices: &[usize]) -> Result<Problem> {
        if indices.is_empty() {
            return Err(Error::argument("cannot restrict a problem to zero samples"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_samples()) {
            return Err(Error::argument(format!("sample index {bad} out of range")));
        }
        Ok(match self {
            Problem::Quadratic(q) => Problem::Quadratic(QuadraticProblem::from_components(
                indices.iter().map(|&i| q.components[i].clone()).collect(),
            )?),
            Problem::Logistic(l) => Problem::Logistic(LogisticProblem {
                data: l.data.select(indices),
                labels: indices.iter().map(|&i| l.labels[i]).collect(),
                lambda: l.lambda,
            }),
        })
    }

    /// Gradient of the j-th sample's objective (regularizer included).
    pub fn sample_gradient_into(&self, j: usize, x: &[f64], out: &mut [f64]) {
        match self {
            Problem::Quadratic(q) => {
                let (a, b) = &q.components[j];
                a.mul_vec_into(x, out);
                for (o, bi) in out.iter_mut().zip(b) {
                    *o -= bi;
                }
            }
            Problem::Logistic(l) => {
                let row = l.data.row(j);
                let y = l.labels[j];
                let coeff = -y * sigmoid(-y * dot(row, x));
                for ((o, a), xi) in out.iter_mut().zip(row).zip(x) {
                    *o = coeff * a + l.lambda * xi;
                }
            }
        }
    }

    /// Mean of the sample gradients over `indices`.
    pub fn subset_gradient(&self, indices: &[usize], x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut acc = vec![0.0; d];
        match self {
            Problem::Quadratic(_) => {
                let mut g = vec![0.0; d];
                for &j in indices {
                    self.sample_gradient_into(j, x, &mut g);
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                let inv = indices.len() as f64;
                acc.iter_mut().for_each(|a| *a /= inv);
            }
            Problem::Logistic(l) => {
                for &j in indices {
                    let row = l.data.row(j);
                    let y = l.labels[j];
                    let coeff = -y * sigmoid(-y * dot(row, x));
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += coeff * r;
                    }
                }
                let m = indices.len() as f64;
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a = *a / m + l.lambda * xi;
                }
            }
        }
        acc
    }

    /// Smoothness constant of each sample objective.
    pub fn sample_smoothness(&self) -> Result<Vec<f64>> {
        match self {
            Problem::Quadratic(q) => q
                .components
                .iter()
                .map(|(a, _)| Ok(symmetric_eigenvalues(a)?[0].max(0.0)))
                .collect(),
            Problem::Logistic(l) => Ok((0..l.data.rows())
                .map(|j| norm_sq(l.data.row(j)) / 4.0 + l.lambda)
                .collect()),
        }
    }

    /// Exact minimizer: a Cholesky solve for quadratics, damped Newton for
    /// logistic regression (stops at `|grad| <= 1e-12` or when no further
    /// progress is possible in floating point).
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        match self {
            Problem::Quadratic(q) => cholesky_solve(&q.a, &q.b),
            Problem::Logistic(l) if l.lambda <= 0.0 => Err(Error::argument("logistic minimizer needs lambda > 0")),
            Problem::Logistic(_) => minimize_sum(std::slice::from_ref(self)),
        }
    }

    /// Adds the Hessian at `x` to the row-major `d x d` buffer `h`.
    pub fn add_hessian(&self, x: &[f64], h: &mut [f64]) {
        let d = self.dim();
        match self {
            Problem::Quadratic(q) => {
                for (hi, ai) in h.iter_mut().zip(q.a.as_slice()) {
                    *hi += ai;
                }
            }
            Problem::Logistic(l) => {
                let n = l.data.rows() as f64;
                for i in 0..l.data.rows() {
                    let row = l.data.row(i);
                    let s = sigmoid(l.labels[i] * dot(row, x));
                    let w = s * (1.0 - s) / n;
                    for r in 0..d {
                        let wr = w * row[r];
                        if wr == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            h[r * d + c] += wr * row[c];
                        }
                    }
                }
                for r in 0..d {
                    h[r * d + r] += l.lambda;
                }
            }
        }
    }
}

/// Minimizer of `sum_i f_i` by damped Newton with Cholesky solves.
///
/// Stops at `|grad| <= 1e-12` or once no further progress is possible in
/// floating point.
pub fn minimize_sum(problems: &[Problem]) -> Result<Vec<f64>> {
    let Some(first) = problems.first() else {
        return Err(Error::argument("nothing to minimize"));
    };
    let d = first.dim();
    if problems.iter().any(|p| p.dim() != d) {
        return Err(Error::argument("problems have different dimensions"));
    }
    let value = |x: &[f64]| problems.iter().map(|p| p.value(x)).sum::<f64>();
    let grad = |x: &[f64]| {
        let mut g = vec![0.0; d];
        let mut gi = vec![0.0; d];
        for p in problems {
            p.gradient_into(x, &mut gi);
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += b;
            }
        }
        g
    };
    let mut x = vec![0.0; d];
    let mut g = grad(&x);
    for _ in 0..100 {
        let gn = norm(&g);
        if gn <= 1e-12 {
            break;
        }
        let mut h = vec![0.0; d * d];
        for p in problems {
            p.add_hessian(&x, &mut h);
        }
        let step = cholesky_solve(&SymMatrix::symmetrize(d, h), &g)?;
        let f0 = value(&x);
        let slope = dot(&g, &step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi - t * si).collect();
            if value(&cand) <= f0 - 1e-4 * t * slope {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let line_search_failed = accepted.is_none();
        // When value comparisons run out of precision, take the full step
        // as long as it still shrinks the gradient.
        let cand = accepted.unwrap_or_else(|| x.iter().zip(&step).map(|(xi, si)| xi - si).collect());
        let g_new = grad(&cand);
        if line_search_failed && norm(&g_new) >= gn {
            break;
        }
        x = cand;
        g = g_new;
    }
    Ok(x)
}

impl Objective for Problem {
    fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.a.dim(),
            Problem::Logistic(l) => l.data.cols(),
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Problem::Quadratic(q) => 0.5 * dot(x, &q.a.mul_vec(x)) - dot(&q.b, x),
            Problem::Logistic(l) => {
                let mut loss = 0.0;
                for i in 0..l.data.rows() {
                    loss += softplus(-l.labels[i] * dot(l.data.row(i), x));
                }
                loss / l.data.rows() as f64 + 0.5 * l.lambda * norm_sq(x)
            }
        }
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Problem::Quadratic(q) => {
                q.a.mul_vec_into(x, out);
                for (o, bi) in out.iter_mut().zip(&q.b) {
                    *o -= bi;
                }
            }
            Problem::Logistic(l) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..l.data.rows() {
                    let row = l.data.row(i);
                    let y = l.labels[i];
                    let coeff = -y * sigmoid(-y * dot(row, x));
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += coeff * a;
                    }
                }
                let n = l.data.rows() as f64;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = *o / n + l.lambda * xi;
                }
            }
        }
    }
}

/// Dimension-checked gradient.
pub fn gradient(p: &Problem, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("gradient", p.dim(), x.len())?;
    Ok(p.gradient(x))
}

/// Partition of sample indices among clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSplit {
    groups: Vec<Vec<usize>>,
}

impl ClientSplit {
    pub fn new(groups: Vec<Vec<usize>>, num_samples: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::argument("split needs at least one client"));
        }
        let mut seen = vec![false; num_samples];
        for (c, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::argument(format!("client {c} has no samples")));
            }
            for &i in g {
                if i >= num_samples {
                    return Err(Error::argument(format!("sample {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::argument(format!("sample {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::argument(format!("sample {i} not assigned")));
        }
        Ok(Self { groups })
    }

    /// One client owning everything.
    pub fn whole(num_samples: usize) -> Self {
        Self {
            groups: vec![(0..num_samples).collect()],
        }
    }

    /// One client per sample.
    pub fn singletons(num_samples: usize) -> Self {
        Self {
            groups: (0..num_samples).map(|i| vec![i]).collect(),
        }
    }

    pub fn clients(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Sort by label, then cut contiguous blocks.
    ShardByLabel,
    /// Sample `i` goes to client `i mod n`.
    RoundRobin,
}

/// Partitions `labels.len()` samples among `clients`.
///
/// For `ShardByLabel` the seed shuffles samples within each label class
/// before the stable sort; round-robin ignores it.
pub fn heterogeneous_split(labels: &[f64], clients: usize, mode: SplitMode, seed: u64) -> Result<ClientSplit> {
    let n_samples = labels.len();
    if clients == 0 || clients > n_samples {
        return Err(Error::argument(format!(
            "cannot split {n_samples} samples among {clients} clients"
        )));
    }
    let order: Vec<usize> = match mode {
        SplitMode::RoundRobin => {
            let mut groups = vec![Vec::new(); clients];
            for i in 0..n_samples {
                groups[i % clients].push(i);
            }
            return ClientSplit::new(groups, n_samples);
        }
        SplitMode::ShardByLabel => {
            let mut idx: Vec<usize> = (0..n_samples).collect();
            let mut rng = StreamRng::new(seed, GENERATOR_STREAM + 3, 0);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            idx.sort_by(|&a, &b| labels[b].total_cmp(&labels[a]));
            idx
        }
    };
    let base = n_samples / clients;
    let extra = n_samples % clients;
    let mut groups = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        let mut g = order[start..start + len].to_vec();
        g.sort_unstable();
        groups.push(g);
        start += len;
    }
    ClientSplit::new(groups, n_samples)
}

/// Gradient of client `i`'s objective at `x`.
pub fn client_gradient(p: &Problem, split: &ClientSplit, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    if i >= split.clients() {
        return Err(Error::argument(format!("client {i} out of range")));
    }
    check_dim("client_gradient", p.dim(), x.len())?;
    Ok(p.restrict(split.group(i))?.gradient(x))
}

/// A problem together with its per-client restrictions.
#[derive(Debug, Clone)]
pub struct Federation {
    global: Problem,
    split: ClientSplit,
    clients: Vec<Problem>,
}

impl Federation {
    pub fn new(global: Problem, split: ClientSplit) -> Result<Self> {
        if split.groups().iter().map(Vec::len).sum::<usize>() != global.num_samples() {
            return Err(Error::argument("split does not cover the problem's samples"));
        }
        let clients = split
            .groups()
            .iter()
            .map(|g| global.restrict(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { global, split, clients })
    }

    pub fn global(&self) -> &Problem {
        &self.global
    }

    pub fn split(&self) -> &ClientSplit {
        &self.split
    }

    pub fn clients(&self) -> &[Problem] {
        &self.clients
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn client(&self, i: usize) -> &Problem {
        &self.clients[i]
    }

    /// Minimizer of `sum_i f_i`, the consensus optimum.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        minimize_sum(&self.clients)
    }

    /// `F(x_1, ..., x_n) = sum_i f_i(x_i)` on client-major stacked vectors.
    pub fn stacked(&self) -> Stacked<'_> {
        Stacked { clients: &self.clients }
    }

    /// Heterogeneous quadratic federation: every client shares the Hessian
    /// `A` (spectrum log-spaced in `[1/kappa, 1]`) and has its own minimizer
    /// `c_i ~ N(0, heterogeneity^2 I)`, i.e. `b_i = A c_i`.
    pub fn heterogeneous_quadratic(
        clients: usize,
        dim: usize,
        kappa: f64,
        heterogeneity: f64,
        seed: u64,
    ) -> Result<Self> {
        let a = random_spd(dim, kappa, seed)?;
        let mut rng = StreamRng::new(seed, GENERATOR_STREAM + 4, 0);
        let components = (0..clients)
            .map(|_| {
                let c: Vec<f64> = (0..dim).map(|_| heterogeneity * normal(&mut rng)).collect::<Vec<f64>>();
                (a.clone(), a.mul_vec(&c))
            })
            .collect();
        let global = Problem::Quadratic(QuadraticProblem::from_components(components)?);
        Self::new(global, ClientSplit::singletons(clients))
    }

    /// Diagonal quadratic clients that share one flat coordinate with
    /// curvature `1/kappa` and draw the curvature of the others from
    /// `[0.1, 1]`, with client 0 pinned to `L = 1`. Local steps alone
    /// cannot fix the flat direction and the differing curvatures make the
    /// client drift depend on the control variates.
    pub fn skewed_curvature_quadratic(clients: usize, dim: usize, kappa: f64, seed: u64) -> Result<Self> {
        if clients == 0 || dim < 2 {
            return Err(Error::argument("need at least one client and dimension >= 2"));
        }
        if !(kappa >= 10.0) || !kappa.is_finite() {
            return Err(Error::argument(format!("kappa must be >= 10, got {kappa}")));
        }
        let mut rng = StreamRng::new(seed, GENERATOR_STREAM + 5, 0);
        let components = (0..clients)
            .map(|i| {
                let diag: Vec<f64> = (0..dim)
                    .map(|k| match k {
                        0 => 1.0 / kappa,
                        1 if i == 0 => 1.0,
                        _ => 10f64.powf(-rng.next_f64()),
                    })
                    .collect();
                let b: Vec<f64> = diag.iter().map(|a| a * normal(&mut rng)).collect();
                (SymMatrix::diagonal(&diag), b)
            })
            .collect();
        let global = Problem::Quadratic(QuadraticProblem::from_components(components)?);
        Self::new(global, ClientSplit::singletons(clients))
    }
}

/// Stacked objective over client blocks.
#[derive(Debug, Clone, Copy)]
pub struct Stacked<'a> {
    clients: &'a [Problem],
}

impl<'a> Stacked<'a> {
    pub fn new(clients: &'a [Problem]) -> Self {
        Self { clients }
    }

    pub fn block_dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn blocks(&self) -> usize {
        self.clients.len()
    }
}

impl Objective for Stacked<'_> {
    fn dim(&self) -> usize {
        self.clients.len() * self.block_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.block_dim();
        self.clients
            .iter()
            .zip(x.chunks_exact(d))
            .map(|(f, xi)| f.value(xi))
            .sum()
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.block_dim();
        for ((f, xi), oi) in self.clients.iter().zip(x.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
            f.gradient_into(xi, oi);
        }
    }
}

/// Random symmetric positive definite matrix with eigenvalues log-spaced
/// in `[1/kappa, 1]` and a random orthonormal eigenbasis.
pub fn random_spd(dim: usize, kappa: f64, seed: u64) -> Result<SymMatrix> {
    if dim == 0 {
        return Err(Error::argument("dimension must be >= 1"));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::argument(format!("kappa must be >= 1, got {kappa}")));
    }
    if dim == 1 && kappa != 1.0 {
        return Err(Error::argument("a 1-dimensional quadratic has kappa = 1"));
    }
    let eigs: Vec<f64> = (0..dim)
        .map(|k| {
            if dim == 1 {
                1.0
            } else {
                kappa.powf(-(k as f64) / (dim - 1) as f64)
            }
        })
        .collect();
    let basis = random_orthonormal(dim, seed);
    let mut m = SymMatrix::from_spectrum(&eigs, &basis);
    // Pin the extreme eigenvalues exactly so L and mu match the request.
    let eig = symmetric_eigen(&m)?;
    m = SymMatrix::from_spectrum(&eigs, &eig.vectors);
    Ok(m)
}

fn random_orthonormal(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = StreamRng::new(seed, GENERATOR_STREAM, 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        for _ in 0..2 {
            for u in &basis {
                let c = dot(u, &v);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= c * ui;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// `L`, `mu` and `kappa = L / mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessInfo {
    pub l: f64,
    pub mu: f64,
    pub kappa: f64,
}

impl SmoothnessInfo {
    pub fn new(l: f64, mu: f64) -> Result<Self> {
        if !(l > 0.0) || !(mu >= 0.0) || mu > l {
            return Err(Error::argument(format!(
                "need L >= mu >= 0 and L > 0, got L={l}, mu={mu}"
            )));
        }
        let kappa = if mu == 0.0 { f64::INFINITY } else { l / mu };
        Ok(Self { l, mu, kappa })
    }
}

/// Quadratics: extreme eigenvalues of `A`. Logistic: the
/// `lambda_max(A^T A) / (4N) + lambda` bound, with `mu = lambda`.
pub fn smoothness_constants(p: &Problem) -> Result<SmoothnessInfo> {
    match p {
        Problem::Quadratic(q) => {
            let ev = symmetric_eigenvalues(&q.a)?;
            let l = ev[0];
            let mu = ev.last().unwrap().max(0.0).min(l);
            SmoothnessInfo::new(l, mu)
        }
        Problem::Logistic(l) => {
            let lip = l.loss_smoothness() + l.lambda;
            SmoothnessInfo::new(lip, l.lambda.min(lip))
        }
    }
}

/// Parsed LIBSVM data with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: DataMatrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    /// Keeps the first `max_samples` rows and `max_features` columns.
    pub fn truncate(&self, max_samples: Option<usize>, max_features: Option<usize>) -> Result<Dataset> {
        let rows = max_samples.map_or(self.data.rows(), |m| m.min(self.data.rows()));
        let cols = max_features.map_or(self.data.cols(), |m| m.min(self.data.cols()));
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&self.data.row(i)[..cols]);
        }
        Ok(Dataset {
            data: DataMatrix::new(rows, cols, data)?,
            labels: self.labels[..rows].to_vec(),
        })
    }
}

/// Parses LIBSVM text: `label idx:val idx:val ...` per line, 1-based indices.
///
/// Labels `0`/`1` are mapped to `-1`/`+1`. Blank lines are skipped; `#`
/// comments are rejected.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.contains('#') {
            return Err(Error::parse(lineno, "comments are not supported"));
        }
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| Error::parse(lineno, format!("invalid label `{label_tok}`")))?;
        let label = if label == 1.0 {
            1.0
        } else if label == -1.0 || label == 0.0 {
            -1.0
        } else {
            return Err(Error::parse(lineno, format!("label {label} is not +1/-1/0/1")));
        };
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(lineno, format!("expected idx:val, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid index `{idx}`")))?;
            if idx == 0 {
                return Err(Error::parse(lineno, "indices are 1-based"));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid value `{val}`")))?;
            if !val.is_finite() {
                return Err(Error::parse(lineno, format!("non-finite value `{val}`")));
            }
            if row.iter().any(|&(i, _)| i == idx) {
                return Err(Error::parse(lineno, format!("duplicate index {idx}")));
            }
            max_index = max_index.max(idx);
            row.push((idx, val));
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::parse(0, "no samples"));
    }
    if max_index == 0 {
        return Err(Error::parse(0, "no features"));
    }
    let mut data = vec![0.0; rows.len() * max_index];
    for (r, row) in rows.iter().enumerate() {
        for &(idx, val) in row {
            data[r * max_index + idx - 1] = val;
        }
    }
    Ok(Dataset {
        data: DataMatrix::new(rows.len(), max_index, data)?,
        labels,
    })
}

pub fn read_libsvm(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_libsvm(&text)
}

/// Serializes nonzero entries; the last column is written explicitly on the
/// first row when no row has a nonzero there, so re-parsing keeps the width.
pub fn write_libsvm(ds: &Dataset) -> String {
    let d = ds.data.cols();
    let last_col_used = (0..ds.data.rows()).any(|i| ds.data.row(i)[d - 1] != 0.0);
    let mut out = String::new();
    let mut buf = ryu::Buffer::new();
    for i in 0..ds.data.rows() {
        out.push_str(if ds.labels[i] > 0.0 { "+1" } else { "-1" });
        for (j, v) in ds.data.row(i).iter().enumerate() {
            let force = i == 0 && j == d - 1 && !last_col_used;
            if *v != 0.0 || force {
                let _ = write!(out, " {}:{}", j + 1, buf.format(*v));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dist_sq, sub};
    use proptest::prelude::*;

    fn logistic_fixture() -> Problem {
        let (data, labels) = LogisticProblem::synthetic(40, 5, 0.1, 3).unwrap();
        Problem::Logistic(LogisticProblem::new(data, labels, 0.05).unwrap())
    }

    fn central_difference(p: &Problem, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (p.value(&xp) - p.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_gradient() {
        let p = Problem::Quadratic(QuadraticProblem::new(SymMatrix::identity(2), vec![1.0, 2.0]).unwrap());
        assert_eq!(gradient(&p, &[0.0, 0.0]).unwrap(), vec![-1.0, -2.0]);
        assert!(gradient(&p, &[0.0]).is_err());
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let p = logistic_fixture();
        let Problem::Logistic(l) = &p else { unreachable!() };
        let n = l.data().rows() as f64;
        let mut expected = vec![0.0; 5];
        for i in 0..l.data().rows() {
            for (e, a) in expected.iter_mut().zip(l.data().row(i)) {
                *e += l.labels()[i] * a;
            }
        }
        expected.iter_mut().for_each(|e| *e *= -1.0 / (2.0 * n));
        let g = p.gradient(&[0.0; 5]);
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let p = logistic_fixture();
        let mut rng = StreamRng::new(9, 99, 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| normal(&mut rng)).collect();
            let g = p.gradient(&x);
            let fd = central_difference(&p, &x, 1e-6);
            let rel = dist_sq(&g, &fd).sqrt() / norm(&g).max(1e-8);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn bregman_matches_direct_evaluation() {
        let p = logistic_fixture();
        let x = [0.3, -1.0, 0.5, 2.0, -0.2];
        let y = [1.0, 0.1, -0.4, 0.0, 0.7];
        let fd = central_difference(&p, &y, 1e-6);
        let direct = p.value(&x) - p.value(&y) - dot(&fd, &sub(&x, &y));
        let d = crate::numerics::bregman_divergence(&p, &x, &y).unwrap();
        assert!(((d - direct) / d).abs() < 1e-5);
    }

    #[test]
    fn client_gradients_average_to_full_gradient() {
        let p = logistic_fixture();
        let x = [0.1, 0.2, -0.3, 0.4, -0.5];
        let whole = ClientSplit::whole(40);
        assert_eq!(client_gradient(&p, &whole, 0, &x).unwrap(), p.gradient(&x));

        let split = heterogeneous_split(p.labels().unwrap(), 2, SplitMode::ShardByLabel, 1).unwrap();
        let g0 = client_gradient(&p, &split, 0, &x).unwrap();
        let g1 = client_gradient(&p, &split, 1, &x).unwrap();
        let full = p.gradient(&x);
        // shard sizes are equal, so the plain mean recovers the full gradient
        for k in 0..5 {
            assert!((0.5 * (g0[k] + g1[k]) - full[k]).abs() < 1e-12);
        }
        assert!(client_gradient(&p, &split, 2, &x).is_err());
    }

    #[test]
    fn identical_clients_match_global_gradient() {
        let (data, labels) = LogisticProblem::synthetic(10, 3, 0.0, 5).unwrap();
        let rows: Vec<Vec<f64>> = (0..20).map(|i| data.row(i % 10).to_vec()).collect();
        let labels2: Vec<f64> = (0..20).map(|i| labels[i % 10]).collect();
        let p = Problem::Logistic(LogisticProblem::new(DataMatrix::from_rows(&rows).unwrap(), labels2, 0.1).unwrap());
        let split = ClientSplit::new(vec![(0..10).collect(), (10..20).collect()], 20).unwrap();
        let x = [0.5, -0.5, 1.0];
        let full = p.gradient(&x);
        for i in 0..2 {
            let g = client_gradient(&p, &split, i, &x).unwrap();
            assert!(dist_sq(&g, &full).sqrt() < 1e-14);
        }
    }

    #[test]
    fn quadratic_smoothness() {
        let p = Problem::Quadratic(QuadraticProblem::new(SymMatrix::diagonal(&[10.0, 1.0]), vec![0.0, 0.0]).unwrap());
        let s = smoothness_constants(&p).unwrap();
        assert_eq!((s.l, s.mu, s.kappa), (10.0, 1.0, 10.0));
    }

    #[test]
    fn logistic_single_sample_smoothness() {
        let data = DataMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let p = Problem::Logistic(LogisticProblem::new(data, vec![1.0], 0.0).unwrap());
        let s = smoothness_constants(&p).unwrap();
        assert!((s.l - 1.0).abs() < 1e-9);
        assert_eq!(s.mu, 0.0);
        assert!(s.kappa.is_infinite());
    }

    #[test]
    fn relative_lambda_rule() {
        let (data, labels) = LogisticProblem::synthetic(50, 4, 0.1, 2).unwrap();
        let base = Problem::Logistic(LogisticProblem::new(data.clone(), labels.clone(), 0.0).unwrap());
        let l0 = smoothness_constants(&base).unwrap().l;
        let p = Problem::Logistic(LogisticProblem::with_relative_lambda(data, labels, 1e-4).unwrap());
        let s = smoothness_constants(&p).unwrap();
        assert!((s.mu - 1e-4 * l0).abs() <= 1e-12 * l0);
    }

    #[test]
    fn parse_basic_libsvm() {
        let ds = parse_libsvm("+1 1:0.5 3:2\n-1 2:1\n").unwrap();
        assert_eq!(ds.data.rows(), 2);
        assert_eq!(ds.data.cols(), 3);
        assert_eq!(ds.data.row(0), &[0.5, 0.0, 2.0]);
        assert_eq!(ds.data.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![1.0, -1.0]);
    }

    #[test]
    fn parse_errors() {
        let err = parse_libsvm("").unwrap_err();
        assert!(err.to_string().contains("no samples"));
        match parse_libsvm("1 2:abc").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_libsvm("1 1:1\n3 1:2\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_libsvm("1 0:1\n").is_err());
        assert!(parse_libsvm("1 1:1 # note\n").is_err());
        assert!(parse_libsvm("1 1 2\n").is_err());
    }

    #[test]
    fn zero_one_labels_are_remapped() {
        let ds = parse_libsvm("0 1:1\n1 1:2\n").unwrap();
        assert_eq!(ds.labels, vec![-1.0, 1.0]);
    }

    #[test]
    fn splits() {
        let labels = [1.0, 1.0, -1.0, -1.0];
        let rr = heterogeneous_split(&labels, 2, SplitMode::RoundRobin, 0).unwrap();
        assert_eq!(rr.groups(), &[vec![0, 2], vec![1, 3]]);
        let single = heterogeneous_split(&labels, 4, SplitMode::ShardByLabel, 0).unwrap();
        assert!(single.groups().iter().all(|g| g.len() == 1));

        let labels = [1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let sh = heterogeneous_split(&labels, 2, SplitMode::ShardByLabel, 7).unwrap();
        let mut label_sets: Vec<Vec<f64>> = sh
            .groups()
            .iter()
            .map(|g| g.iter().map(|&i| labels[i]).collect())
            .collect();
        label_sets.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(label_sets, vec![vec![-1.0; 3], vec![1.0; 3]]);
        assert_eq!(sh, heterogeneous_split(&labels, 2, SplitMode::ShardByLabel, 7).unwrap());

        assert!(heterogeneous_split(&labels, 7, SplitMode::RoundRobin, 0).is_err());
    }

    #[test]
    fn split_validation() {
        assert!(ClientSplit::new(vec![vec![0], vec![]], 1).is_err());
        assert!(ClientSplit::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(ClientSplit::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn minimizers_zero_the_gradient() {
        let q = Problem::Quadratic(QuadraticProblem::random(6, 100.0, 4).unwrap());
        let x = q.minimizer().unwrap();
        assert!(norm(&q.gradient(&x)) < 1e-10);
        let l = logistic_fixture();
        let x = l.minimizer().unwrap();
        assert!(norm(&l.gradient(&x)) <= 1e-12);
    }

    #[test]
    fn random_quadratic_has_requested_conditioning() {
        let q = Problem::Quadratic(QuadraticProblem::random(8, 1e4, 1).unwrap());
        let s = smoothness_constants(&q).unwrap();
        assert!((s.l - 1.0).abs() < 1e-12);
        assert!((s.kappa / 1e4 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn skewed_quadratic_condition_numbers() {
        let fed = Federation::skewed_curvature_quadratic(4, 4, 9e4, 3).unwrap();
        let mut l = 0.0f64;
        for c in fed.clients() {
            let s = smoothness_constants(c).unwrap();
            assert!((s.mu - 1.0 / 9e4).abs() < 1e-12);
            l = l.max(s.l);
        }
        assert_eq!(l, 1.0);
        assert!((smoothness_constants(fed.global()).unwrap().mu - 1.0 / 9e4).abs() < 1e-12);
        assert!(Federation::skewed_curvature_quadratic(2, 1, 100.0, 0).is_err());
    }

    #[test]
    fn heterogeneous_quadratic_clients_differ() {
        let fed = Federation::heterogeneous_quadratic(4, 3, 10.0, 1.0, 2).unwrap();
        let x = vec![0.0; 3];
        let g0 = fed.client(0).gradient(&x);
        let g1 = fed.client(1).gradient(&x);
        assert!(dist_sq(&g0, &g1) > 1e-6);
    }

    proptest! {
        #[test]
        fn client_gradient_mean_identity(seed in 0u64..50, clients in 1usize..6, x in prop::collection::vec(-2.0..2.0f64, 4)) {
            let (data, labels) = LogisticProblem::synthetic(30, 4, 0.2, seed).unwrap();
            let p = Problem::Logistic(LogisticProblem::new(data, labels, 0.01).unwrap());
            let split = heterogeneous_split(p.labels().unwrap(), clients, SplitMode::RoundRobin, seed).unwrap();
            // weight each client by its share of samples
            let mut mean = [0.0; 4];
            for i in 0..clients {
                let g = client_gradient(&p, &split, i, &x).unwrap();
                let w = split.group(i).len() as f64 / 30.0;
                for k in 0..4 { mean[k] += w * g[k]; }
            }
            let full = p.gradient(&x);
            for k in 0..4 { prop_assert!((mean[k] - full[k]).abs() < 1e-12); }
        }

        #[test]
        fn smoothness_and_strong_convexity_bounds(seed in 0u64..200) {
            let p = logistic_fixture();
            let s = smoothness_constants(&p).unwrap();
            let mut rng = StreamRng::new(seed, 77, 0);
            let x: Vec<f64> = (0..5).map(|_| 3.0 * normal(&mut rng)).collect::<Vec<f64>>();
            let y: Vec<f64> = (0..5).map(|_| 3.0 * normal(&mut rng)).collect::<Vec<f64>>();
            let d = crate::numerics::bregman_divergence(&p, &x, &y).unwrap();
            let r2 = dist_sq(&x, &y);
            prop_assert!(d >= 0.5 * s.mu * r2 * (1.0 - 1e-9));
            prop_assert!(d <= 0.5 * s.l * r2 * (1.0 + 1e-9));
            let gx = p.gradient(&x);
            let gy = p.gradient(&y);
            prop_assert!(dist_sq(&gx, &gy).sqrt() <= s.l * r2.sqrt() * (1.0 + 1e-9));
            let sym = dot(&sub(&gx, &gy), &sub(&x, &y));
            let dyx = crate::numerics::bregman_divergence(&p, &y, &x).unwrap();
            prop_assert!((sym - (d + dyx)).abs() <= 1e-10 * sym.abs().max(1e-300));
        }

        #[test]
        fn libsvm_round_trip(rows in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0f64), -5.0..5.0f64], 4), 1..6),
                             labels in prop::collection::vec(prop::bool::ANY, 6)) {
            let n = rows.len();
            let ds = Dataset {
                data: DataMatrix::from_rows(&rows).unwrap(),
                labels: labels[..n].iter().map(|&b| if b { 1.0 } else { -1.0 }).collect(),
            };
            let once = parse_libsvm(&write_libsvm(&ds)).unwrap();
            let twice = parse_libsvm(&write_libsvm(&once)).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(&once, &ds);
        }
    }
}
