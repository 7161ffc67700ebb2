//! Compound soft-Dice + cross-entropy loss, both terms with unit weight.
//!
//! With `Y = softmax(logits)` over the class axis and one-hot labels `L`:
//!
//! ```text
//! loss = 1 - mean_c( 2 sum_j L Y / (sum_j L^2 + sum_j Y^2) )
//!        - (1 / N) sum_c sum_j L log Y
//! ```
//!
//! A class with an empty denominator contributes a Dice ratio of 1.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

pub fn soft_dice_ce_terms(tape: &Tape, logits: Var, onehot: Var) -> Result<LossTerms> {
    let shape = tape.shape(logits);
    if shape != tape.shape(onehot) || shape.len() < 2 {
        return Err(Error::shape(format!(
            "logits {shape:?} vs one-hot {:?}",
            tape.shape(onehot)
        )));
    }
    let classes = shape[0];
    let voxels: usize = shape[1..].iter().product();
    let probs = tape.softmax(logits, 0)?;
    let y = tape.reshape(probs, &[classes, voxels])?;
    let l = tape.reshape(onehot, &[classes, voxels])?;

    let ly = tape.mul(l, y)?;
    let inter = tape.sum_lastdim(ly);
    let ll = tape.mul(l, l)?;
    let yy = tape.mul(y, y)?;
    let l2 = tape.sum_lastdim(ll);
    let y2 = tape.sum_lastdim(yy);
    let denom = tape.add(l2, y2)?;
    let twice = tape.scale(inter, 2.0);
    let ratio = tape.safe_div(twice, denom, 1.0)?;
    let mean_ratio = tape.mean(ratio);
    let neg = tape.scale(mean_ratio, -1.0);
    let dice = tape.add_scalar(neg, 1.0);

    let logy = tape.log_clamped(y);
    let llog = tape.mul(l, logy)?;
    let s = tape.sum(llog);
    let ce = tape.scale(s, -1.0 / voxels as f64);

    let total = tape.add(dice, ce)?;
    Ok(LossTerms { total, dice, ce })
}

pub fn soft_dice_ce_loss(tape: &Tape, logits: Var, onehot: Var) -> Result<Var> {
    Ok(soft_dice_ce_terms(tape, logits, onehot)?.total)
}

/// `[num_classes, W, H, D]` one-hot encoding of a label grid.
pub fn one_hot(labels: &[u16], spatial: [usize; 3], num_classes: usize) -> Result<Tensor> {
    let n: usize = spatial.iter().product();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for spatial {spatial:?}",
            labels.len()
        )));
    }
    let mut v = vec![0.0; num_classes * n];
    for (j, &c) in labels.iter().enumerate() {
        let c = c as usize;
        if c >= num_classes {
            return Err(Error::InvalidConfig(format!(
                "label {c} outside {num_classes} classes"
            )));
        }
        v[c * n + j] = 1.0;
    }
    Tensor::new([num_classes, spatial[0], spatial[1], spatial[2]], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let tape = Tape::new();
        let labels = [0u16, 1, 1, 0, 1, 0, 0, 1];
        let oh = one_hot(&labels, [2, 2, 2], 2).unwrap();
        // Large logit margin makes the softmax exactly one-hot in f64.
        let logits = Tensor::new(oh.shape(), oh.values().iter().map(|v| v * 1000.0).collect()).unwrap();
        let lv = tape.constant(logits);
        let ov = tape.constant(oh);
        let t = soft_dice_ce_terms(&tape, lv, ov).unwrap();
        assert!(tape.value(t.total).item().abs() <= 1e-9);
    }

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let tape = Tape::new();
        let labels = [0u16, 1, 1, 0, 1, 0, 0, 1];
        let oh = tape.constant(one_hot(&labels, [2, 2, 2], 2).unwrap());
        let lv = tape.constant(Tensor::zeros([2, 2, 2, 2]));
        let t = soft_dice_ce_terms(&tape, lv, oh).unwrap();
        assert!((tape.value(t.ce).item() - std::f64::consts::LN_2).abs() <= 1e-9);
        // each class: 2 * 4 * 0.5 / (4 + 8 * 0.25) = 2/3
        assert!((tape.value(t.dice).item() - (1.0 - 2.0 / 3.0)).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros([3, 2, 2, 2]));
        assert!(matches!(
            soft_dice_ce_loss(&tape, a, b),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(one_hot(&[0, 3], [2, 1, 1], 3).is_err());
    }
}
