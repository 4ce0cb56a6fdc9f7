//! Proximity operators.
//!
//! `prox(op, s, x) = argmin_y 1/2 |y - x|^2 + s * psi(y)`. The consensus
//! operator works on stacked vectors of `n` client blocks of length `d`,
//! laid out client-major; its prox is the block average, i.e. one
//! communication round.

use crate::error::{Error, Result};
use crate::numerics::{check_dim, mean_of_blocks};

#[derive(Debug, Clone, PartialEq)]
pub enum ProxOperator {
    /// `weight * |x|_1`
    L1 { weight: f64 },
    /// `weight * |x|^2`
    SquaredL2 { weight: f64 },
    /// Indicator of `{x_1 = ... = x_n}` on `R^{n d}`.
    Consensus { clients: usize, dim: usize },
    /// Indicator of the singleton `{0}`.
    IndicatorZero,
}

impl ProxOperator {
    pub fn l1(weight: f64) -> Result<Self> {
        check_weight(weight)?;
        Ok(ProxOperator::L1 { weight })
    }

    pub fn squared_l2(weight: f64) -> Result<Self> {
        check_weight(weight)?;
        Ok(ProxOperator::SquaredL2 { weight })
    }

    pub fn consensus(clients: usize, dim: usize) -> Result<Self> {
        if clients == 0 || dim == 0 {
            return Err(Error::argument("consensus needs clients >= 1 and dim >= 1"));
        }
        Ok(ProxOperator::Consensus { clients, dim })
    }

    /// The zero regularizer, as a zero-weight L1 term.
    pub fn zero() -> Self {
        ProxOperator::L1 { weight: 0.0 }
    }

    /// Whether the operator is the identity map for every scale.
    pub fn is_identity(&self) -> bool {
        matches!(self, ProxOperator::L1 { weight } | ProxOperator::SquaredL2 { weight } if *weight == 0.0)
    }

    /// Regularizer value; `f64::INFINITY` outside an indicator's set.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ProxOperator::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxOperator::SquaredL2 { weight } => weight * x.iter().map(|v| v * v).sum::<f64>(),
            ProxOperator::Consensus { clients, dim } => {
                let first = &x[..*dim];
                let same = (1..*clients).all(|i| &x[i * dim..(i + 1) * dim] == first);
                if same {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxOperator::IndicatorZero => {
                if x.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    fn check_input(&self, scale: f64, len: usize) -> Result<()> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::argument(format!("prox scale must be > 0, got {scale}")));
        }
        if let ProxOperator::Consensus { clients, dim } = self {
            check_dim("consensus prox", clients * dim, len)?;
        }
        Ok(())
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(Error::argument(format!("weight must be >= 0, got {weight}")));
    }
    Ok(())
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `prox_{scale * psi}(x)`.
pub fn prox(op: &ProxOperator, scale: f64, x: &[f64]) -> Result<Vec<f64>> {
    op.check_input(scale, x.len())?;
    if op.is_identity() {
        return Ok(x.to_vec());
    }
    Ok(match op {
        ProxOperator::L1 { weight } => {
            let t = scale * weight;
            x.iter().map(|&v| soft_threshold(v, t)).collect()
        }
        ProxOperator::SquaredL2 { weight } => {
            let denom = 1.0 + 2.0 * scale * weight;
            x.iter().map(|v| v / denom).collect()
        }
        ProxOperator::Consensus { clients, dim } => consensus_average(x, *clients, *dim),
        ProxOperator::IndicatorZero => vec![0.0; x.len()],
    })
}

/// Replaces each client block by the mean block.
pub fn consensus_average(x: &[f64], clients: usize, dim: usize) -> Vec<f64> {
    let mean = mean_of_blocks(x.chunks_exact(dim));
    let mut out = Vec::with_capacity(clients * dim);
    for _ in 0..clients {
        out.extend_from_slice(&mean);
    }
    out
}

/// `prox_{scale * psi^*}(y)` for operators with a closed-form conjugate prox.
pub fn prox_conjugate(op: &ProxOperator, scale: f64, y: &[f64]) -> Result<Vec<f64>> {
    op.check_input(scale, y.len())?;
    match op {
        // psi^* = 0
        ProxOperator::IndicatorZero => Ok(y.to_vec()),
        // psi^* is the indicator of the weight-radius box
        ProxOperator::L1 { weight } => Ok(y.iter().map(|v| v.clamp(-weight, *weight)).collect()),
        other => Err(Error::unsupported(format!(
            "conjugate prox is not implemented for {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dist_sq, sub};
    use proptest::prelude::*;

    #[test]
    fn consensus_prox_averages_blocks() {
        let op = ProxOperator::consensus(2, 2).unwrap();
        let out = prox(&op, 1.0, &[1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(out, vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn l1_is_soft_thresholding() {
        let op = ProxOperator::l1(1.0).unwrap();
        assert_eq!(prox(&op, 1.0, &[3.0, -0.5]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn squared_l2_shrinks() {
        // argmin 1/2 (y - 2)^2 + 0.5 y^2 -> y = 1
        let op = ProxOperator::squared_l2(1.0).unwrap();
        assert_eq!(prox(&op, 0.5, &[2.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let op = ProxOperator::l1(1.0).unwrap();
        assert!(matches!(prox(&op, 0.0, &[1.0]), Err(Error::Argument(_))));
        assert!(matches!(prox(&op, -1.0, &[1.0]), Err(Error::Argument(_))));
        assert!(ProxOperator::l1(-1.0).is_err());
        let c = ProxOperator::consensus(2, 2).unwrap();
        assert!(prox(&c, 1.0, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn conjugate_of_indicator_zero_is_identity() {
        let op = ProxOperator::IndicatorZero;
        assert_eq!(prox_conjugate(&op, 0.7, &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(prox_conjugate(&op, 3.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn moreau_decomposition_for_l1() {
        let op = ProxOperator::l1(1.0).unwrap();
        let x = [3.0, -0.5];
        let p = prox(&op, 1.0, &x).unwrap();
        let q = prox_conjugate(&op, 1.0, &x).unwrap();
        // clip-to-[-1, 1] oracle
        let oracle: Vec<f64> = x.iter().map(|v: &f64| v.clamp(-1.0, 1.0)).collect();
        assert_eq!(q, oracle);
        assert_eq!(q, vec![1.0, -0.5]);
        let sum: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
        assert_eq!(sum, x.to_vec());
    }

    #[test]
    fn unsupported_conjugates_error() {
        let op = ProxOperator::squared_l2(1.0).unwrap();
        assert!(matches!(prox_conjugate(&op, 1.0, &[1.0]), Err(Error::Unsupported(_))));
        let op = ProxOperator::consensus(1, 1).unwrap();
        assert!(matches!(prox_conjugate(&op, 1.0, &[1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_weight_is_identity() {
        let x = [1.0, -2.5, 0.0];
        assert_eq!(prox(&ProxOperator::zero(), 3.0, &x).unwrap(), x.to_vec());
    }

    fn ops() -> impl Strategy<Value = ProxOperator> {
        prop_oneof![
            (0.0..3.0f64).prop_map(|w| ProxOperator::L1 { weight: w }),
            (0.0..3.0f64).prop_map(|w| ProxOperator::SquaredL2 { weight: w }),
            Just(ProxOperator::Consensus { clients: 3, dim: 2 }),
            Just(ProxOperator::IndicatorZero),
        ]
    }

    proptest! {
        #[test]
        fn firmly_nonexpansive(
            op in ops(),
            x in prop::collection::vec(-10.0..10.0f64, 6),
            y in prop::collection::vec(-10.0..10.0f64, 6),
            s in 1e-3..10.0f64,
        ) {
            let px = prox(&op, s, &x).unwrap();
            let py = prox(&op, s, &y).unwrap();
            let qx = sub(&x, &px);
            let qy = sub(&y, &py);
            let lhs = dist_sq(&px, &py) + dist_sq(&qx, &qy);
            prop_assert!(lhs <= dist_sq(&x, &y) + 1e-12 * (1.0 + dist_sq(&x, &y)));
        }

        #[test]
        fn consensus_is_idempotent_and_feasible(x in prop::collection::vec(-10.0..10.0f64, 8)) {
            let op = ProxOperator::Consensus { clients: 4, dim: 2 };
            let once = prox(&op, 1.0, &x).unwrap();
            let twice = prox(&op, 1.0, &once).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(op.value(&once), 0.0);
        }
    }
}
