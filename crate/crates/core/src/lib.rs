//! Prox-skipping optimization.
//!
//! Solvers that take many cheap gradient steps between rare, expensive
//! proximal (communication) steps while keeping linear convergence, via a
//! control variate that makes the optimum a fixed point of the skipped
//! iteration.
//!
//! - [`solvers`]: ProxGD, ProxSkip and its stochastic-gradient variant, plus
//!   Lyapunov tooling.
//! - [`federated`]: Scaffnew and the LocalGD, Scaffold and GD baselines.
//! - [`decentralized`]: mixing matrices, decentralized Scaffnew and the
//!   primal-dual SplitSkip solver.
//! - [`harness`]: JSON-configured experiments with CSV/JSON output.
//! - [`verify`]: self-checks of the convergence inequalities, solver
//!   equivalences and output determinism.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod decentralized;
pub mod error;
pub mod federated;
pub mod harness;
pub mod numerics;
pub mod problems;
pub mod prox;
pub mod record;
pub mod rng;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};
