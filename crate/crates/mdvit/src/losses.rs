//! Training objectives: Dice, BCE, the combined segmentation loss, the
//! symmetric Dice distillation loss, and the Eq. 1 total.
//!
//! All builders record onto a [`Tape`] and return scalar nodes, so any of
//! them can serve as a backward root. Dice uses smoothing epsilon 1.0 with
//! per-item-then-batch-mean reduction; BCE is computed from logits in the
//! numerically stable form.

use crate::autodiff::{Tape, Var};
use crate::error::{MdvitError, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Dice smoothing epsilon.
pub const DICE_EPS: f64 = 1.0;

fn check_unit_range<T: Scalar>(what: &str, v: &ArrayD<T>) -> Result<()> {
    for &x in v.iter() {
        if !(x >= T::zero() && x <= T::one()) {
            return Err(MdvitError::contract(format!(
                "{what} must lie in [0, 1], found {x}"
            )));
        }
    }
    Ok(())
}

/// Dice loss between two probability maps `(B, 1, H, W)`:
/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` per item, then batch
/// mean. Gradients flow into both arguments.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(MdvitError::shape(format!(
            "dice_loss shape mismatch: {:?} vs {:?}",
            tape.value(pred).shape(),
            tape.value(target).shape()
        )));
    }
    check_unit_range("dice_loss pred", tape.value(pred))?;
    check_unit_range("dice_loss target", tape.value(target))?;
    let eps = T::from_f64(DICE_EPS);
    let prod = tape.mul(pred, target);
    let inter = tape.sum_per_item(prod);
    let psum = tape.sum_per_item(pred);
    let tsum = tape.sum_per_item(target);
    let num = tape.scale(inter, T::from_f64(2.0));
    let num = tape.add_const(num, eps);
    let den = tape.add(psum, tsum);
    let den = tape.add_const(den, eps);
    let ratio = tape.div(num, den);
    let neg = tape.scale(ratio, -T::one());
    let per_item = tape.add_const(neg, T::one());
    Ok(tape.mean_all(per_item))
}

/// Mean BCE from logits against a constant binary (or soft) target.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &ArrayD<T>) -> Result<Var> {
    if tape.value(logits).shape() != target.shape() {
        return Err(MdvitError::shape(format!(
            "bce_loss shape mismatch: {:?} vs {:?}",
            tape.value(logits).shape(),
            target.shape()
        )));
    }
    check_unit_range("bce_loss target", target)?;
    Ok(tape.bce_with_logits(logits, target))
}

/// Combined segmentation loss: `dice(sigmoid(logits), target) + bce(logits, target)`.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &ArrayD<T>) -> Result<Var> {
    let probs = tape.sigmoid(logits);
    let target_var = tape.leaf(target.clone());
    let dice = dice_loss(tape, probs, target_var)?;
    let bce = bce_loss(tape, logits, target)?;
    Ok(tape.add(dice, bce))
}

/// Mutual-distillation loss: symmetric Dice between the universal and peer
/// probability maps. Neither side is detached.
pub fn mkd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    universal_probs: Var,
    peer_probs: Var,
) -> Result<Var> {
    dice_loss(tape, universal_probs, peer_probs)
}

/// The component values of one Eq. 1 evaluation.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_seg_u: f64,
    pub l_seg_a: Vec<f64>,
    pub l_mkd: Vec<f64>,
    pub total: f64,
}

impl LossBundle {
    /// Recompute the Eq. 1 identity from the stored components.
    pub fn recompute_total(&self, alpha: f64, beta: f64) -> f64 {
        self.l_seg_u
            + alpha * self.l_seg_a.iter().sum::<f64>()
            + beta * self.l_mkd.iter().sum::<f64>()
    }
}

/// On-tape Eq. 1 assembly: scalar roots for the two backward passes plus the
/// reported total.
///
/// `main_term` = L_seg^u + beta * sum L_mkd (backpropagated in full);
/// `peer_seg_term` = alpha * sum L_seg^a (backpropagated with DA barriers);
/// `total` = main_term + peer_seg_term.
pub struct TotalLoss {
    pub total: Var,
    pub main_term: Var,
    pub peer_seg_term: Var,
    pub bundle: LossBundle,
}

/// Assemble Eq. 1 from already-built scalar loss nodes. Empty-domain terms
/// are represented by `None` and contribute zero with no gradient.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_seg_u: Var,
    l_seg_a: &[Option<Var>],
    l_mkd: &[Option<Var>],
    alpha: f64,
    beta: f64,
) -> TotalLoss {
    assert_eq!(
        l_seg_a.len(),
        l_mkd.len(),
        "per-domain term lists must align"
    );
    let sum_opt = |tape: &mut Tape<T>, terms: &[Option<Var>]| -> Option<Var> {
        let mut acc: Option<Var> = None;
        for t in terms.iter().flatten() {
            acc = Some(match acc {
                Some(a) => tape.add(a, *t),
                None => *t,
            });
        }
        acc
    };

    let mkd_sum = sum_opt(tape, l_mkd);
    let main_term = match mkd_sum {
        Some(s) => {
            let scaled = tape.scale(s, T::from_f64(beta));
            tape.add(l_seg_u, scaled)
        }
        None => l_seg_u,
    };

    let seg_a_sum = sum_opt(tape, l_seg_a);
    let peer_seg_term = match seg_a_sum {
        Some(s) => tape.scale(s, T::from_f64(alpha)),
        None => tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[]))),
    };

    let total = tape.add(main_term, peer_seg_term);
    let bundle = LossBundle {
        l_seg_u: tape.scalar(l_seg_u).to_f64(),
        l_seg_a: l_seg_a
            .iter()
            .map(|t| t.map(|v| tape.scalar(v).to_f64()).unwrap_or(0.0))
            .collect(),
        l_mkd: l_mkd
            .iter()
            .map(|t| t.map(|v| tape.scalar(v).to_f64()).unwrap_or(0.0))
            .collect(),
        total: tape.scalar(total).to_f64(),
    };
    TotalLoss {
        total,
        main_term,
        peer_seg_term,
        bundle,
    }
}
