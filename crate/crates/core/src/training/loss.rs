use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "trunc_l1")]
    TruncatedL1,
    #[serde(rename = "ce")]
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::TruncatedL1 => "trunc_l1",
            LossKind::CrossEntropy => "ce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trunc_l1" => Ok(Self::TruncatedL1),
            "ce" => Ok(Self::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Scalar loss and its gradient with respect to every score.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad_pos: Vec<T>,
    pub grad_neg: Vec<T>,
}

fn check_nonempty<T>(pos: &[T], neg: &[T]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "loss needs at least one normal and one anomalous score".into(),
        ));
    }
    Ok(())
}

/// Two-sided hinge: `max(0, th_pos - D(q)) + max(0, D(q-) - th_neg)`,
/// averaged over locations. The kink itself gets zero gradient.
pub fn truncated_l1_loss<T: Real>(pos: &[T], neg: &[T], th_pos: T, th_neg: T) -> Result<LossOutput<T>> {
    check_nonempty(pos, neg)?;
    let np = T::lit(pos.len() as f64);
    let nn = T::lit(neg.len() as f64);
    let mut total_pos = 0f64;
    let grad_pos = pos
        .iter()
        .map(|&s| {
            let gap = th_pos - s;
            if gap > T::zero() {
                total_pos += gap.as_f64();
                -T::one() / np
            } else {
                T::zero()
            }
        })
        .collect();
    let mut total_neg = 0f64;
    let grad_neg = neg
        .iter()
        .map(|&s| {
            let gap = s - th_neg;
            if gap > T::zero() {
                total_neg += gap.as_f64();
                T::one() / nn
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(LossOutput {
        loss: total_pos / pos.len() as f64 + total_neg / neg.len() as f64,
        grad_pos,
        grad_neg,
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on logits, normal scores labelled 1 and synthesised
/// anomalies 0, averaged over all scores.
pub fn cross_entropy_loss<T: Real>(pos: &[T], neg: &[T]) -> Result<LossOutput<T>> {
    check_nonempty(pos, neg)?;
    let total = (pos.len() + neg.len()) as f64;
    let loss = (pos.iter().map(|s| softplus(-s.as_f64())).sum::<f64>()
        + neg.iter().map(|s| softplus(s.as_f64())).sum::<f64>())
        / total;
    let grad_pos = pos
        .iter()
        .map(|s| T::lit(-sigmoid(-s.as_f64()) / total))
        .collect();
    let grad_neg = neg
        .iter()
        .map(|s| T::lit(sigmoid(s.as_f64()) / total))
        .collect();
    Ok(LossOutput {
        loss,
        grad_pos,
        grad_neg,
    })
}

pub fn compute_loss<T: Real>(
    kind: LossKind,
    pos: &[T],
    neg: &[T],
    th_pos: T,
    th_neg: T,
) -> Result<LossOutput<T>> {
    match kind {
        LossKind::TruncatedL1 => truncated_l1_loss(pos, neg, th_pos, th_neg),
        LossKind::CrossEntropy => cross_entropy_loss(pos, neg),
    }
}
