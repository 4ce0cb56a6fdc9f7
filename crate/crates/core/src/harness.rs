//! JSON-configured experiments.
//!
//! A config names a problem, an optional client split and graph, a list of
//! methods and seeds. [`run_experiment`] resolves every method's
//! hyperparameters, runs each `(method, seed)` pair, and writes one CSV per
//! run plus a `manifest.json`.
//!
//! ```json
//! {
//!   "problem": {"kind": "quadratic", "dim": 10, "kappa": 100, "clients": 5},
//!   "methods": ["gd", {"name": "scaffnew", "stepsize": "tuned"}],
//!   "seeds": [1, 2, 3]
//! }
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decentralized::{
    decentralized_optimal_probability, mixing_matrix, run_decentralized_scaffnew, DecentralizedConfig,
    DecentralizedProbe, MixingMatrix, Topology,
};
use crate::error::{Error, Result};
use crate::federated::{run_gd_baseline, run_local_gd, run_scaffnew, run_scaffold, FederatedProbe, LocalStepsConfig};
use crate::numerics::dist_sq;
use crate::problems::{
    heterogeneous_split, read_libsvm, smoothness_constants, ClientSplit, Federation, LogisticProblem, Problem,
    SmoothnessInfo, SplitMode,
};
use crate::prox::ProxOperator;
use crate::record::{read_csv, RunControl, RunRecord, RunRow, RunStatus};
use crate::solvers::{
    contraction_rate, expected_smoothness_constants, lyapunov, optimal_probability, run_prox_gd, run_proxskip,
    run_sproxskip, sproxskip_parameter_rule, Probe, ProxSkipConfig, StochasticOracle,
};

fn default_seeds() -> Vec<u64> {
    (0..11).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_log_every() -> u64 {
    1
}

fn default_max_iterations() -> u64 {
    1_000_000
}

fn default_lambda_factor() -> f64 {
    1e-4
}

fn default_flip() -> f64 {
    0.1
}

fn default_one() -> f64 {
    1.0
}

fn default_one_client() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// Graph for decentralized methods; its node count must equal the
    /// number of clients.
    #[serde(default)]
    pub topology: Option<Topology>,
    /// Regularizer for the single-process methods.
    #[serde(default)]
    pub regularizer: Option<RegularizerSpec>,
    pub methods: Vec<MethodSpec>,
    /// Probability grid; every method that uses `p` runs once per value.
    #[serde(default)]
    pub p: Option<Vec<f64>>,
    /// Horizon of every run; when absent it is estimated from the
    /// method's rate and `target`, capped at `max_iterations`.
    #[serde(default)]
    pub iterations: Option<u64>,
    /// Relative accuracy on the method's progress measure; runs stop when
    /// it is reached. Defaults to `1e-6` when `iterations` is absent.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default)]
    pub comm_budget: Option<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub tuning: TuningSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Clients share a Hessian with spectrum in `[1/kappa, 1]` and have
    /// their own minimizers.
    #[serde(alias = "synthetic-quadratic")]
    Quadratic {
        dim: usize,
        kappa: f64,
        #[serde(default = "default_one_client")]
        clients: usize,
        #[serde(default = "default_one")]
        heterogeneity: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Diagonal clients sharing one flat direction with curvature
    /// `1/kappa` and differing elsewhere.
    SkewedQuadratic {
        dim: usize,
        kappa: f64,
        #[serde(default = "default_one_client")]
        clients: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic logistic regression.
    #[serde(alias = "synthetic-logistic")]
    Logistic {
        samples: usize,
        dim: usize,
        #[serde(default = "default_flip")]
        flip: f64,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_lambda_factor")]
        lambda_factor: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Logistic regression on a LIBSVM file, optionally truncated.
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        max_samples: Option<usize>,
        #[serde(default)]
        max_features: Option<usize>,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_lambda_factor")]
        lambda_factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitModeSpec {
    ShardByLabel,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub clients: usize,
    pub mode: SplitModeSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegularizerSpec {
    L1 { weight: f64 },
    SquaredL2 { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSpec {
    /// Communication rounds each grid point may use.
    #[serde(default = "default_tuning_budget")]
    pub budget: u64,
    /// Exponents `k` of the grid `gamma = 2^k / L`.
    #[serde(default = "default_grid")]
    pub grid: Vec<i32>,
}

fn default_tuning_budget() -> u64 {
    200
}

fn default_grid() -> Vec<i32> {
    (-3..=6).collect()
}

impl Default for TuningSpec {
    fn default() -> Self {
        Self {
            budget: default_tuning_budget(),
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Gradient descent (ProxGD when a regularizer is set).
    Gd,
    Proxskip,
    Sproxskip,
    Scaffnew,
    LocalGd,
    Scaffold,
    DecentralizedScaffnew,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Gd => "gd",
            MethodKind::Proxskip => "proxskip",
            MethodKind::Sproxskip => "sproxskip",
            MethodKind::Scaffnew => "scaffnew",
            MethodKind::LocalGd => "local-gd",
            MethodKind::Scaffold => "scaffold",
            MethodKind::DecentralizedScaffnew => "decentralized-scaffnew",
        }
    }

    fn uses_probability(self) -> bool {
        !matches!(self, MethodKind::Gd)
    }

    fn is_central(self) -> bool {
        matches!(self, MethodKind::Gd | MethodKind::Proxskip | MethodKind::Sproxskip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepsizeMode {
    Theoretical,
    Tuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stepsize {
    Mode(StepsizeMode),
    Value(f64),
}

impl Default for Stepsize {
    fn default() -> Self {
        Stepsize::Mode(StepsizeMode::Theoretical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleSpec {
    Exact,
    Gaussian { sigma: f64 },
    Minibatch { batch: usize },
}

impl From<OracleSpec> for StochasticOracle {
    fn from(o: OracleSpec) -> Self {
        match o {
            OracleSpec::Exact => StochasticOracle::Exact,
            OracleSpec::Gaussian { sigma } => StochasticOracle::AdditiveGaussian { sigma },
            OracleSpec::Minibatch { batch } => StochasticOracle::Minibatch { batch },
        }
    }
}

/// A method with optional overrides. In JSON either a bare name or an
/// object with a `name` field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSpec {
    pub name: MethodKind,
    pub label: Option<String>,
    pub stepsize: Stepsize,
    pub p: Option<f64>,
    /// Local steps per round (LocalGD, Scaffold) or dual stepsize
    /// (decentralized Scaffnew).
    pub tau: Option<f64>,
    pub oracle: Option<OracleSpec>,
    /// Target accuracy for the SProxSkip parameter rule.
    pub epsilon: Option<f64>,
}

impl MethodSpec {
    pub fn new(name: MethodKind) -> Self {
        Self {
            name,
            label: None,
            stepsize: Stepsize::default(),
            p: None,
            tau: None,
            oracle: None,
            epsilon: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodObject {
    name: MethodKind,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    stepsize: Stepsize,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    oracle: Option<OracleSpec>,
    #[serde(default)]
    epsilon: Option<f64>,
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct MethodVisitor;

        impl<'de> Visitor<'de> for MethodVisitor {
            type Value = MethodSpec;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a method name or a method object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<MethodSpec, E> {
                let name = MethodKind::deserialize(de::value::StrDeserializer::<E>::new(v))?;
                Ok(MethodSpec::new(name))
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<MethodSpec, A::Error> {
                let o = MethodObject::deserialize(de::value::MapAccessDeserializer::new(map))?;
                Ok(MethodSpec {
                    name: o.name,
                    label: o.label,
                    stepsize: o.stepsize,
                    p: o.p,
                    tau: o.tau,
                    oracle: o.oracle,
                    epsilon: o.epsilon,
                })
            }
        }

        deserializer.deserialize_any(MethodVisitor)
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. Relative data paths are
    /// resolved against `base_dir` when given.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string())
        })?;
        if let (Some(base), ProblemSpec::Libsvm { path, .. }) = (base_dir, &mut cfg.problem) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(config_error("methods", "at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if let Some(ps) = &self.p {
            if ps.is_empty() {
                return Err(config_error("p", "probability grid is empty"));
            }
            if let Some(bad) = ps.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err(config_error("p", format!("probability {bad} not in (0, 1]")));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Some(p) = m.p {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(config_error(format!("methods[{i}].p"), format!("{p} not in (0, 1]")));
                }
            }
            if let Stepsize::Value(g) = m.stepsize {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(config_error(format!("methods[{i}].stepsize"), "must be > 0"));
                }
            }
            if let Some(eps) = m.epsilon {
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(config_error(format!("methods[{i}].epsilon"), "must be in (0, 1)"));
                }
            }
            if self.regularizer.is_some() && !m.name.is_central() {
                return Err(config_error(
                    format!("methods[{i}].name"),
                    "a regularizer is only supported by gd, proxskip and sproxskip",
                ));
            }
            if m.name == MethodKind::DecentralizedScaffnew && self.topology.is_none() {
                return Err(config_error("topology", "decentralized methods need a topology"));
            }
        }
        if let Some(t) = self.target {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_error("target", "must be in (0, 1)"));
            }
        }
        if self.log_every == 0 {
            return Err(config_error("log_every", "must be >= 1"));
        }
        if self.tuning.grid.is_empty() {
            return Err(config_error("tuning.grid", "grid is empty"));
        }
        Ok(())
    }

    /// Relative target in effect.
    pub fn effective_target(&self) -> Option<f64> {
        match (self.target, self.iterations) {
            (Some(t), _) => Some(t),
            (None, None) => Some(1e-6),
            (None, Some(_)) => None,
        }
    }
}

/// Reads a config file; see [`ExperimentConfig::from_json_str`].
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_json_str(&text, path.parent())?;
    Ok((cfg, config_hash_of_text(&text)?))
}

/// SHA-256 of the config with keys sorted and whitespace removed.
pub fn config_hash_of_text(text: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| config_error("", e.to_string()))?;
    Ok(hex_digest(
        serde_json::to_string(&value).expect("JSON values serialize").as_bytes(),
    ))
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("configs serialize");
    hex_digest(serde_json::to_string(&value).expect("JSON values serialize").as_bytes())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Everything derived from a config before any method runs.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub federation: Federation,
    /// Smoothness of the global objective.
    pub info: SmoothnessInfo,
    /// Largest client smoothness constant and smallest client strong
    /// convexity, used by the multi-client methods.
    pub client_info: SmoothnessInfo,
    pub mixing: Option<MixingMatrix>,
    pub regularizer: ProxOperator,
    pub central_probe: Probe,
    pub federated_probe: FederatedProbe,
    pub decentralized_probe: Option<DecentralizedProbe>,
    pub x0: Vec<f64>,
}

impl ExperimentContext {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (global, default_split) = build_problem(&cfg.problem)?;
        let split = match &cfg.split {
            None => default_split,
            Some(s) => {
                let mode = match s.mode {
                    SplitModeSpec::ShardByLabel => SplitMode::ShardByLabel,
                    SplitModeSpec::RoundRobin => SplitMode::RoundRobin,
                };
                match (mode, global.labels()) {
                    (SplitMode::ShardByLabel, None) => {
                        return Err(config_error("split.mode", "shard-by-label needs a labelled problem"))
                    }
                    (_, Some(labels)) => heterogeneous_split(labels, s.clients, mode, s.seed)?,
                    (_, None) => {
                        let pseudo = vec![1.0; global.num_samples()];
                        heterogeneous_split(&pseudo, s.clients, mode, s.seed)?
                    }
                }
            }
        };
        let federation = Federation::new(global, split)?;
        let info = smoothness_constants(federation.global())?;
        let mut l = 0.0f64;
        let mut mu = f64::INFINITY;
        for c in federation.clients() {
            let s = smoothness_constants(c)?;
            l = l.max(s.l);
            mu = mu.min(s.mu);
        }
        let client_info = SmoothnessInfo::new(l, mu.min(l))?;
        let mixing = match &cfg.topology {
            None => None,
            Some(top) => {
                if top.nodes() != federation.num_clients() {
                    return Err(config_error(
                        "topology",
                        format!(
                            "graph has {} nodes but there are {} clients",
                            top.nodes(),
                            federation.num_clients()
                        ),
                    ));
                }
                Some(mixing_matrix(top)?)
            }
        };
        let regularizer = match cfg.regularizer {
            None => ProxOperator::zero(),
            Some(RegularizerSpec::L1 { weight }) => ProxOperator::l1(weight)?,
            Some(RegularizerSpec::SquaredL2 { weight }) => ProxOperator::squared_l2(weight)?,
        };
        let central_probe = if regularizer.is_identity() {
            Probe::for_problem(federation.global())?
        } else {
            Probe::composite(federation.global(), &regularizer, info.l)?
        };
        let needs_federated = cfg.methods.iter().any(|m| !m.name.is_central());
        let federated_probe = if needs_federated {
            FederatedProbe::new(&federation)?
        } else {
            FederatedProbe {
                x_star: central_probe.x_star.clone(),
                h_star: Vec::new(),
            }
        };
        let decentralized_probe = match &mixing {
            Some(m) => Some(DecentralizedProbe::new(&federation, m)?),
            None => None,
        };
        let x0 = vec![0.0; federation.dim()];
        Ok(Self {
            federation,
            info,
            client_info,
            mixing,
            regularizer,
            central_probe,
            federated_probe,
            decentralized_probe,
            x0,
        })
    }
}

fn build_problem(spec: &ProblemSpec) -> Result<(Problem, ClientSplit)> {
    let logistic = |data, labels, lambda: Option<f64>, factor: f64| -> Result<Problem> {
        Ok(Problem::Logistic(match lambda {
            Some(l) => LogisticProblem::new(data, labels, l)?,
            None => LogisticProblem::with_relative_lambda(data, labels, factor)?,
        }))
    };
    match spec {
        ProblemSpec::Quadratic {
            dim,
            kappa,
            clients,
            heterogeneity,
            seed,
        } => {
            let fed = Federation::heterogeneous_quadratic(*clients, *dim, *kappa, *heterogeneity, *seed)?;
            Ok((fed.global().clone(), fed.split().clone()))
        }
        ProblemSpec::SkewedQuadratic {
            dim,
            kappa,
            clients,
            seed,
        } => {
            let fed = Federation::skewed_curvature_quadratic(*clients, *dim, *kappa, *seed)?;
            Ok((fed.global().clone(), fed.split().clone()))
        }
        ProblemSpec::Logistic {
            samples,
            dim,
            flip,
            lambda,
            lambda_factor,
            seed,
        } => {
            let (data, labels) = LogisticProblem::synthetic(*samples, *dim, *flip, *seed)?;
            let p = logistic(data, labels, *lambda, *lambda_factor)?;
            let n = p.num_samples();
            Ok((p, ClientSplit::whole(n)))
        }
        ProblemSpec::Libsvm {
            path,
            max_samples,
            max_features,
            lambda,
            lambda_factor,
        } => {
            let ds = read_libsvm(path)?.truncate(*max_samples, *max_features)?;
            let p = logistic(ds.data, ds.labels, *lambda, *lambda_factor)?;
            let n = p.num_samples();
            Ok((p, ClientSplit::whole(n)))
        }
    }
}

/// Fully resolved hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub label: String,
    pub method: MethodKind,
    pub seed: u64,
    pub gamma: f64,
    pub p: Option<f64>,
    /// Local steps per round or dual stepsize, depending on the method.
    pub tau: Option<f64>,
    pub iterations: u64,
    pub oracle: OracleSpec,
}

fn iterations_for_rate(rate: f64, target: Option<f64>, cfg: &ExperimentConfig) -> u64 {
    if let Some(t) = cfg.iterations {
        return t;
    }
    let target = target.unwrap_or(1e-6);
    let est = (2.0 * (1.0 / target).ln() / rate.max(1e-300)).ceil();
    if est.is_finite() && est < cfg.max_iterations as f64 {
        (est as u64).max(1)
    } else {
        cfg.max_iterations
    }
}

/// Resolves a method with a given stepsize (or its theoretical one).
fn resolve(
    ctx: &ExperimentContext,
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    p_override: Option<f64>,
    gamma_override: Option<f64>,
    label: String,
    seed: u64,
) -> Result<ResolvedRun> {
    let kind = method.name;
    let info = if kind.is_central() { ctx.info } else { ctx.client_info };
    let mu = info.mu;
    let oracle = method.oracle.unwrap_or(OracleSpec::Exact);
    let fixed = match method.stepsize {
        Stepsize::Value(g) => Some(g),
        Stepsize::Mode(_) => None,
    };
    let gamma_given = gamma_override.or(fixed);
    let p = p_override.or(method.p);
    let default_p = || -> Result<f64> {
        match kind {
            MethodKind::DecentralizedScaffnew => {
                let m = ctx.mixing.as_ref().expect("validated");
                decentralized_optimal_probability(&info, m.delta())
            }
            _ => optimal_probability(&info),
        }
    };
    let target = cfg.effective_target();
    let run = match kind {
        MethodKind::Gd => {
            let gamma = gamma_given.unwrap_or(1.0 / info.l);
            ResolvedRun {
                label,
                method: kind,
                seed,
                gamma,
                p: None,
                tau: None,
                iterations: iterations_for_rate(gamma * mu, target, cfg),
                oracle,
            }
        }
        MethodKind::Proxskip | MethodKind::Scaffnew => {
            let p = match p {
                Some(p) => p,
                None => default_p()?,
            };
            let gamma = gamma_given.unwrap_or(1.0 / info.l);
            ResolvedRun {
                label,
                method: kind,
                seed,
                gamma,
                p: Some(p),
                tau: None,
                iterations: iterations_for_rate(contraction_rate(gamma, mu, p), target, cfg),
                oracle,
            }
        }
        MethodKind::Sproxskip => {
            let stoch: StochasticOracle = oracle.into();
            let es =
                expected_smoothness_constants(&stoch, ctx.federation.global(), &info, Some(&ctx.central_probe.x_star))?;
            let eps = method.epsilon.unwrap_or(1e-2);
            let base = dist_sq(&ctx.x0, &ctx.central_probe.x_star);
            let first = sproxskip_parameter_rule(&info, &es, eps, base)?;
            let zeros = vec![0.0; ctx.x0.len()];
            let psi0 = lyapunov(
                &ctx.x0,
                &zeros,
                &ctx.central_probe.x_star,
                &ctx.central_probe.h_star,
                first.gamma,
                first.p,
            );
            let rule = sproxskip_parameter_rule(&info, &es, eps, psi0)?;
            ResolvedRun {
                label,
                method: kind,
                seed,
                gamma: gamma_given.unwrap_or(rule.gamma),
                p: Some(p.unwrap_or(rule.p)),
                tau: None,
                iterations: cfg
                    .iterations
                    .unwrap_or_else(|| rule.iterations.clamp(1, cfg.max_iterations)),
                oracle,
            }
        }
        MethodKind::LocalGd | MethodKind::Scaffold => {
            let local_steps = match (method.tau, p) {
                (Some(t), _) => t.round().max(1.0),
                (None, Some(p)) => (1.0 / p).round().max(1.0),
                (None, None) => (1.0 / default_p()?).round().max(1.0),
            };
            let gamma = gamma_given.unwrap_or(1.0 / (local_steps * info.l));
            let iterations = iterations_for_rate(gamma * mu, target, cfg);
            ResolvedRun {
                label,
                method: kind,
                seed,
                gamma,
                p: None,
                tau: Some(local_steps),
                iterations: iterations.div_ceil(local_steps as u64) * local_steps as u64,
                oracle,
            }
        }
        MethodKind::DecentralizedScaffnew => {
            let p = match p {
                Some(p) => p,
                None => default_p()?,
            };
            let gamma = gamma_given.unwrap_or(1.0 / info.l);
            let tau = method.tau.unwrap_or(p / gamma);
            let delta = ctx.mixing.as_ref().expect("validated").delta();
            let dcfg = DecentralizedConfig::new(gamma, tau, p, 0, seed)?;
            let rate = crate::decentralized::decentralized_rate(&dcfg, mu, delta);
            ResolvedRun {
                label,
                method: kind,
                seed,
                gamma,
                p: Some(p),
                tau: Some(tau),
                iterations: iterations_for_rate(rate, target, cfg),
                oracle,
            }
        }
    };
    Ok(run)
}

fn control_for(cfg: &ExperimentConfig) -> RunControl {
    RunControl {
        log_every: cfg.log_every,
        target: cfg.effective_target(),
        comm_budget: cfg.comm_budget,
        divergence_limit: 1e12,
    }
}

/// Executes one resolved run.
pub fn execute(ctx: &ExperimentContext, run: &ResolvedRun, control: &RunControl) -> Result<RunRecord> {
    let fed = &ctx.federation;
    let oracle: StochasticOracle = run.oracle.into();
    let mut record = match run.method {
        MethodKind::Gd => {
            if ctx.regularizer.is_identity() {
                run_gd_baseline(
                    fed.global(),
                    run.gamma,
                    run.iterations,
                    &ctx.x0,
                    Some(&ctx.central_probe),
                    control,
                )?
                .0
            } else {
                run_prox_gd(
                    fed.global(),
                    &ctx.regularizer,
                    run.gamma,
                    run.iterations,
                    ctx.x0.clone(),
                    Some(&ctx.central_probe),
                    control,
                )?
                .0
            }
        }
        MethodKind::Proxskip | MethodKind::Sproxskip => {
            let cfg = ProxSkipConfig::new(run.gamma, run.p.expect("resolved"), run.iterations, run.seed)?;
            let h0 = vec![0.0; ctx.x0.len()];
            if run.method == MethodKind::Proxskip && oracle.is_exact() {
                run_proxskip(
                    fed.global(),
                    &ctx.regularizer,
                    &cfg,
                    ctx.x0.clone(),
                    h0,
                    Some(&ctx.central_probe),
                    control,
                )?
                .0
            } else {
                run_sproxskip(
                    fed.global(),
                    &ctx.regularizer,
                    &oracle,
                    &cfg,
                    ctx.x0.clone(),
                    h0,
                    Some(&ctx.central_probe),
                    control,
                )?
                .0
            }
        }
        MethodKind::Scaffnew => {
            let cfg = ProxSkipConfig::new(run.gamma, run.p.expect("resolved"), run.iterations, run.seed)?;
            run_scaffnew(fed, &cfg, &oracle, &ctx.x0, Some(&ctx.federated_probe), control)?.0
        }
        MethodKind::LocalGd | MethodKind::Scaffold => {
            let tau = run.tau.expect("resolved") as u64;
            let cfg = LocalStepsConfig::new(run.gamma, tau, run.iterations / tau, run.seed)?;
            if run.method == MethodKind::LocalGd {
                run_local_gd(fed, &cfg, &oracle, &ctx.x0, Some(&ctx.federated_probe), control)?.0
            } else {
                run_scaffold(fed, &cfg, &oracle, &ctx.x0, Some(&ctx.federated_probe), control)?.0
            }
        }
        MethodKind::DecentralizedScaffnew => {
            let cfg = DecentralizedConfig::new(
                run.gamma,
                run.tau.expect("resolved"),
                run.p.expect("resolved"),
                run.iterations,
                run.seed,
            )?;
            let mixing = ctx.mixing.as_ref().expect("validated");
            run_decentralized_scaffnew(fed, mixing, &cfg, &ctx.x0, ctx.decentralized_probe.as_ref(), control)?.0
        }
    };
    record.method = run.label.clone();
    record.seed = run.seed;
    Ok(record)
}

/// Grid search over `gamma = 2^k / L`: each candidate runs with the
/// method's other theoretical parameters until `budget` communication
/// rounds, and the one with the smallest final `|x - x*|^2` wins.
pub fn tune_stepsize(
    ctx: &ExperimentContext,
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    p: Option<f64>,
    budget: u64,
    grid: &[i32],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::argument("stepsize grid is empty"));
    }
    let l = if method.name.is_central() {
        ctx.info.l
    } else {
        ctx.client_info.l
    };
    let seed = cfg.seeds[0];
    let control = RunControl {
        log_every: u64::MAX,
        target: None,
        comm_budget: Some(budget),
        divergence_limit: 1e12,
    };
    let mut table = Vec::with_capacity(grid.len());
    for &k in grid {
        let gamma = 2f64.powi(k) / l;
        let error = match resolve(ctx, cfg, method, p, Some(gamma), method.name.name().into(), seed) {
            // configurations the method rejects (e.g. gamma tau / p > 1) count as failures
            Err(_) => f64::INFINITY,
            Ok(mut run) => {
                run.iterations = cfg.max_iterations;
                match execute(ctx, &run, &control) {
                    Ok(rec) if rec.status != RunStatus::Diverged => {
                        rec.last().dist_sq.filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
                    }
                    _ => f64::INFINITY,
                }
            }
        };
        table.push((gamma, error));
    }
    let best = table
        .iter()
        .filter(|(_, e)| e.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(g, _)| *g)
        .ok_or_else(|| Error::argument("every stepsize on the grid diverged"))?;
    Ok((best, table))
}

/// Per-run entry of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub file: String,
    #[serde(flatten)]
    pub params: ResolvedRun,
    pub status: RunStatus,
    pub final_t: u64,
    pub comm_rounds: u64,
    pub grad_evals: u64,
    pub final_dist_sq: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub dim: usize,
    pub samples: usize,
    pub clients: usize,
    pub l: f64,
    pub mu: f64,
    pub kappa: f64,
    pub client_l: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub problem: ProblemSummary,
    pub runs: Vec<ManifestRun>,
}

fn format_p(p: f64) -> String {
    ryu::Buffer::new().format(p).to_string()
}

/// Resolves every `(method, p, seed)` combination, tuning stepsizes where
/// requested (once per method and `p`, on the first seed).
pub fn plan_runs(ctx: &ExperimentContext, cfg: &ExperimentConfig) -> Result<Vec<ResolvedRun>> {
    let mut plans = Vec::new();
    let mut used = std::collections::HashSet::new();
    for method in &cfg.methods {
        let ps: Vec<Option<f64>> = match (&cfg.p, method.name.uses_probability() && method.p.is_none()) {
            (Some(grid), true) => grid.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        for p in ps {
            let mut label = method.label.clone().unwrap_or_else(|| method.name.name().to_string());
            if let Some(p) = p {
                let _ = write!(label, "-p{}", format_p(p));
            }
            let base = label.clone();
            let mut k = 1;
            while !used.insert(label.clone()) {
                k += 1;
                label = format!("{base}-{k}");
            }
            let gamma = match method.stepsize {
                Stepsize::Mode(StepsizeMode::Tuned) => {
                    let budget = cfg.comm_budget.unwrap_or(cfg.tuning.budget);
                    Some(tune_stepsize(ctx, cfg, method, p, budget, &cfg.tuning.grid)?.0)
                }
                _ => None,
            };
            for &seed in &cfg.seeds {
                plans.push(resolve(ctx, cfg, method, p, gamma, label.clone(), seed)?);
            }
        }
    }
    Ok(plans)
}

/// Runs a config and writes CSVs plus `manifest.json` into `out_dir`.
/// Runs execute on `jobs` threads; outputs do not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize, hash: &str) -> Result<Manifest> {
    cfg.validate()?;
    let ctx = ExperimentContext::build(cfg)?;
    let plans = plan_runs(&ctx, cfg)?;
    let control = control_for(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::argument(format!("thread pool: {e}")))?;
    let results: Vec<Result<(RunRecord, f64)>> = pool.install(|| {
        plans
            .par_iter()
            .map(|run| {
                let start = Instant::now();
                let rec = execute(&ctx, run, &control)?;
                Ok((rec, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::with_capacity(plans.len());
    for (plan, result) in plans.into_iter().zip(results) {
        let (rec, secs) = result?;
        let file = format!("{}-seed{}.csv", plan.label, plan.seed);
        rec.write_csv(&out_dir.join(&file))?;
        let last = rec.last();
        runs.push(ManifestRun {
            file,
            status: rec.status,
            final_t: last.t,
            comm_rounds: last.comm_rounds,
            grad_evals: last.grad_evals,
            final_dist_sq: last.dist_sq,
            wall_clock_seconds: secs,
            params: plan,
        });
    }
    let fed = &ctx.federation;
    let manifest = Manifest {
        config_hash: hash.to_string(),
        problem: ProblemSummary {
            dim: fed.dim(),
            samples: fed.global().num_samples(),
            clients: fed.num_clients(),
            l: ctx.info.l,
            mu: ctx.info.mu,
            kappa: ctx.info.kappa,
            client_l: ctx.client_info.l,
            delta: ctx.mixing.as_ref().map(|m| m.delta()),
        },
        runs,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_error("manifest", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Comm,
    Grad,
    Iter,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comm" => Ok(Axis::Comm),
            "grad" => Ok(Axis::Grad),
            "iter" => Ok(Axis::Iter),
            other => Err(Error::argument(format!(
                "unknown axis `{other}` (expected comm, grad or iter)"
            ))),
        }
    }
}

/// One point of a plot series.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub method: String,
    pub seed: u64,
    pub x: u64,
    pub y: f64,
}

/// Long-format `method,seed,x,y` with `y = max(|x - x*|^2, 1e-30)`. On the
/// communication axis only the last row of each round is kept.
pub fn emit_plot_data(records: &[RunRecord], axis: Axis) -> Result<String> {
    let mut out = String::from("method,seed,x,y\n");
    let mut buf = ryu::Buffer::new();
    for rec in records {
        let pick = |r: &RunRow| match axis {
            Axis::Comm => r.comm_rounds,
            Axis::Grad => r.grad_evals,
            Axis::Iter => r.t,
        };
        let mut points: Vec<(u64, f64)> = Vec::with_capacity(rec.rows.len());
        for r in &rec.rows {
            let y = r
                .dist_sq
                .ok_or_else(|| Error::argument(format!("record `{}` has no error series to plot", rec.method)))?;
            let x = pick(r);
            match points.last_mut() {
                Some(last) if axis == Axis::Comm && last.0 == x => *last = (x, y),
                _ => points.push((x, y)),
            }
        }
        for (x, y) in points {
            let y = if y.is_nan() { y } else { y.max(1e-30) };
            let ys = if y.is_finite() {
                buf.format_finite(y).to_string()
            } else {
                y.to_string()
            };
            let _ = writeln!(out, "{},{},{},{}", rec.method, rec.seed, x, ys);
        }
    }
    Ok(out)
}

pub fn parse_plot_data(text: &str) -> Result<Vec<PlotPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("method,seed,x,y") {
        return Err(Error::parse(1, "expected header `method,seed,x,y`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::parse(i + 2, format!("malformed row `{line}`"));
            let mut it = line.rsplitn(4, ',');
            let y = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let x = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let seed = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let method = it.next().ok_or_else(bad)?.to_string();
            Ok(PlotPoint { method, seed, x, y })
        })
        .collect()
}

/// Loads every run listed in a manifest (CSV paths are relative to it).
pub fn load_records(manifest_path: &Path) -> Result<Vec<RunRecord>> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .runs
        .iter()
        .map(|r| {
            Ok(RunRecord {
                method: r.params.label.clone(),
                seed: r.params.seed,
                status: r.status,
                rows: read_csv(&dir.join(&r.file))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"problem": {"kind": "synthetic-quadratic", "kappa": 100, "dim": 10}, "methods": ["proxskip"], "seeds": [1]}"#
    }

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::from_json_str(minimal(), None).unwrap();
        assert_eq!(cfg.effective_target(), Some(1e-6));
        let ctx = ExperimentContext::build(&cfg).unwrap();
        let plans = plan_runs(&ctx, &cfg).unwrap();
        assert_eq!(plans.len(), 1);
        assert!((plans[0].gamma - 1.0 / ctx.info.l).abs() < 1e-12);
        assert!((plans[0].p.unwrap() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = r#"{"problem": {"kind": "quadratic", "kappa": 10, "dim": 2}, "methods": ["gd"], "foo": 1}"#;
        let err = ExperimentConfig::from_json_str(text, None).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let text =
            r#"{"problem": {"kind": "quadratic", "kappa": 10, "dim": 2}, "methods": [{"name": "gd", "bar": 1}]}"#;
        let err = ExperimentConfig::from_json_str(text, None).unwrap_err().to_string();
        assert!(err.contains("bar") && err.contains("methods[0]"), "{err}");
    }

    #[test]
    fn invalid_values_are_reported() {
        let text = r#"{"problem": {"kind": "quadratic", "kappa": 10, "dim": 2}, "methods": []}"#;
        assert!(ExperimentConfig::from_json_str(text, None).is_err());
        let text = r#"{"problem": {"kind": "quadratic", "kappa": 10, "dim": 2}, "methods": ["gd"], "p": [1.5]}"#;
        assert!(ExperimentConfig::from_json_str(text, None).is_err());
        let text =
            r#"{"problem": {"kind": "quadratic", "kappa": 10, "dim": 2}, "methods": ["decentralized-scaffnew"]}"#;
        assert!(ExperimentConfig::from_json_str(text, None).is_err());
        let text = r#"{"problem": {"kind": "cubic"}, "methods": ["gd"]}"#;
        let err = ExperimentConfig::from_json_str(text, None).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn logistic_lambda_defaults_to_relative_rule() {
        let text = r#"{"problem": {"kind": "logistic", "samples": 50, "dim": 4}, "methods": ["gd"], "seeds": [0]}"#;
        let cfg = ExperimentConfig::from_json_str(text, None).unwrap();
        let ctx = ExperimentContext::build(&cfg).unwrap();
        let Problem::Logistic(l) = ctx.federation.global() else {
            panic!()
        };
        let base = LogisticProblem::new(l.data().clone(), l.labels().to_vec(), 0.0).unwrap();
        let l0 = smoothness_constants(&Problem::Logistic(base)).unwrap().l;
        assert!((l.lambda() - 1e-4 * l0).abs() <= 1e-12 * l0);
    }

    #[test]
    fn tuning_grid_edge_cases() {
        let cfg = ExperimentConfig::from_json_str(minimal(), None).unwrap();
        let ctx = ExperimentContext::build(&cfg).unwrap();
        let gd = MethodSpec::new(MethodKind::Gd);
        let (g, table) = tune_stepsize(&ctx, &cfg, &gd, None, 50, &[0]).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(g, 1.0 / ctx.info.l);
        // 2^7 / L overshoots by far
        assert!(tune_stepsize(&ctx, &cfg, &gd, None, 50, &[7]).is_err());
        assert!(tune_stepsize(&ctx, &cfg, &gd, None, 50, &[]).is_err());
    }

    #[test]
    fn tuned_gd_is_near_classical_optimum() {
        let cfg = ExperimentConfig::from_json_str(minimal(), None).unwrap();
        let ctx = ExperimentContext::build(&cfg).unwrap();
        let gd = MethodSpec::new(MethodKind::Gd);
        let (g, _) = tune_stepsize(&ctx, &cfg, &gd, None, 300, &default_grid()).unwrap();
        let classical = 2.0 / (ctx.info.l + ctx.info.mu);
        assert!(g <= 2.0 * classical && g >= classical / 2.0);
    }

    fn record(method: &str, rows: &[(u64, u64, f64)]) -> RunRecord {
        RunRecord {
            method: method.into(),
            seed: 3,
            status: RunStatus::Completed,
            rows: rows
                .iter()
                .map(|&(t, c, d)| RunRow {
                    t,
                    comm_rounds: c,
                    grad_evals: 2 * t,
                    dist_sq: Some(d),
                    lyapunov: None,
                    dispersion: None,
                })
                .collect(),
        }
    }

    #[test]
    fn plot_data_axes() {
        let r = record("a", &[(0, 0, 1.0), (1, 0, 0.5), (2, 1, 0.25), (3, 1, 0.0)]);
        let iter = emit_plot_data(std::slice::from_ref(&r), Axis::Iter).unwrap();
        assert_eq!(iter.lines().count(), 5);
        let comm = parse_plot_data(&emit_plot_data(std::slice::from_ref(&r), Axis::Comm).unwrap()).unwrap();
        assert_eq!(
            comm.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(),
            vec![(0, 0.5), (1, 1e-30)]
        );
        let pts = parse_plot_data(&iter).unwrap();
        assert_eq!(pts.iter().map(|p| p.y).collect::<Vec<_>>(), vec![1.0, 0.5, 0.25, 1e-30]);
        assert!("bogus".parse::<Axis>().is_err());
        let mut missing = r.clone();
        missing.rows[1].dist_sq = None;
        assert!(emit_plot_data(&[missing], Axis::Iter).is_err());
    }

    proptest::proptest! {
        #[test]
        fn comm_axis_collapses_rounds(steps in proptest::collection::vec((0u64..3, 0.0..1.0f64), 1..60)) {
            let mut comm = 0;
            let rows: Vec<(u64, u64, f64)> = steps
                .iter()
                .enumerate()
                .map(|(t, &(inc, d))| {
                    comm += inc.min(1);
                    (t as u64, comm, d)
                })
                .collect();
            let r = record("m", &rows);
            let pts = parse_plot_data(&emit_plot_data(std::slice::from_ref(&r), Axis::Comm).unwrap()).unwrap();
            let rounds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.1).collect();
            proptest::prop_assert_eq!(pts.len(), rounds.len());
            for w in pts.windows(2) {
                proptest::prop_assert!(w[0].x < w[1].x);
            }
            for pt in &pts {
                let last = rows.iter().rev().find(|r| r.1 == pt.x).unwrap();
                proptest::prop_assert_eq!(pt.y, last.2.max(1e-30));
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for k in [
            MethodKind::Gd,
            MethodKind::Proxskip,
            MethodKind::Sproxskip,
            MethodKind::Scaffnew,
            MethodKind::LocalGd,
            MethodKind::Scaffold,
            MethodKind::DecentralizedScaffnew,
        ] {
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}
