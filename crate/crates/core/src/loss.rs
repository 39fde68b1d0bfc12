//! Binary cross-entropy and soft Dice losses over probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var, NUMERIC_FLOOR};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Dice => "dice",
        }
    }

    pub fn evaluate<T: Scalar>(self, g: &mut Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
        match self {
            LossKind::CrossEntropy => bce_loss(g, probs, target),
            LossKind::Dice => dice_loss(g, probs, target),
        }
    }
}

fn check_target<T: Scalar>(op: &'static str, probs: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(op, probs.dims(), target.dims()));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(format!("{op}: target mask is not binary")));
    }
    Ok(())
}

/// `-mean(g ln p + (1-g) ln(1-p))` with `p` clamped to `[1e-12, 1-1e-12]`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    check_target("bce_loss", g.value(probs)?, target)?;
    let p = g.clamp(probs, NUMERIC_FLOOR, 1.0 - NUMERIC_FLOOR)?;
    let t = g.constant(target.clone())?;
    let one_minus_t = g.constant(target.map(|v| T::one() - v))?;
    let log_p = g.log(p)?;
    let neg_p = g.neg(p)?;
    let q = g.add_scalar(neg_p, 1.0)?;
    let log_q = g.log(q)?;
    let pos = g.mul(t, log_p)?;
    let neg = g.mul(one_minus_t, log_q)?;
    let total = g.add(pos, neg)?;
    let mean = g.mean(total, None)?;
    g.neg(mean)
}

/// `1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)`, reduced jointly over
/// every element of the batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    check_target("dice_loss", g.value(probs)?, target)?;
    let t = g.constant(target.clone())?;
    let target_sq: T = target.data().iter().map(|&v| v * v).sum();
    let pg = g.mul(probs, t)?;
    let inter = g.sum(pg, None)?;
    let numer = g.mul_scalar(inter, 2.0)?;
    let numer = g.add_scalar(numer, DICE_SMOOTHING)?;
    let pp = g.mul(probs, probs)?;
    let p_sq = g.sum(pp, None)?;
    let denom = g.add_scalar(p_sq, target_sq.as_f64() + DICE_SMOOTHING)?;
    let ratio = g.div(numer, denom)?;
    let neg = g.neg(ratio)?;
    g.add_scalar(neg, 1.0)
}
