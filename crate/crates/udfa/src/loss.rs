//! Weighted sum of soft Dice and pixel-wise cross-entropy.

use candle_core::{DType, Tensor};

use crate::nn::log_softmax;
use crate::{Result, UdfaError};

/// Smoothing added to numerator and denominator of every per-class Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Scalar loss values for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub ce_term: f64,
}

/// Differentiable loss tensors plus their values.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub value: LossValue,
}

/// `(B, H, W)` integer labels to a `(B, C, H, W)` one-hot tensor of `dtype`.
pub fn one_hot(labels: &Tensor, num_classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = labels.dims3()?;
    let labels = labels.to_dtype(DType::U32)?;
    let classes = Tensor::arange(0u32, num_classes as u32, labels.device())?.reshape((1, num_classes, 1, 1))?;
    let oh = labels
        .reshape((b, 1, h, w))?
        .broadcast_eq(&classes)?
        .to_dtype(dtype)?;
    Ok(oh)
}

/// `w_dice · (1 − mean_c softDice_c) + w_ce · CE`, with softmax over the
/// class axis of `(B, C, H, W)` logits. Works in any float dtype.
pub fn dice_ce_loss(logits: &Tensor, labels: &Tensor, w_dice: f64, w_ce: f64) -> Result<LossOutput> {
    let (b, c, h, w) = logits.dims4()?;
    let (lb, lh, lw) = labels.dims3()?;
    if (lb, lh, lw) != (b, h, w) {
        return Err(UdfaError::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let max_label = labels.to_dtype(DType::U32)?.max_all()?.to_scalar::<u32>()?;
    if max_label as usize >= c {
        return Err(UdfaError::Data(format!(
            "label {max_label} out of range for {c} classes"
        )));
    }
    let target = one_hot(labels, c, logits.dtype())?;
    let logp = log_softmax(logits, 1)?;
    let n = (b * h * w) as f64;
    let ce = ((&target * &logp)?.sum_all()? * (-1.0 / n))?;
    let p = logp.exp()?;
    // per-class sums over batch and space
    let per_class = |t: &Tensor| -> Result<Tensor> {
        Ok(t.transpose(0, 1)?.reshape((c, b * h * w))?.sum(1)?)
    };
    let inter = per_class(&(&p * &target)?)?;
    let denom = (per_class(&p)? + per_class(&target)?)?;
    let ratio = ((inter * 2.0)? + DICE_EPS)?.div(&(denom + DICE_EPS)?)?;
    let dice = (ratio.mean_all()?.neg()? + 1.0)?;
    let total = ((&dice * w_dice)? + (&ce * w_ce)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let value = LossValue {
        total: scalar(&total)?,
        dice_term: scalar(&dice)?,
        ce_term: scalar(&ce)?,
    };
    if !value.total.is_finite() {
        return Err(UdfaError::NonFinite(format!(
            "loss is {} (dice {}, ce {})",
            value.total, value.dice_term, value.ce_term
        )));
    }
    Ok(LossOutput { total, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn labels(v: &[u32], b: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_slice(v, (b, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = labels(&[0, 1, 2, 1], 1, 2, 2);
        let z = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let out = dice_ce_loss(&z, &l, 1.0, 1.0).unwrap();
        assert!((out.value.ce_term - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // two classes, labels [[0,1],[1,1]]; logits give p1 = [0.2, 0.6, 0.9, 0.5]
        let p1 = [0.2f64, 0.6, 0.9, 0.5];
        let z1: Vec<f64> = p1.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let mut logits = vec![0.0; 4];
        logits.extend_from_slice(&z1);
        let x = Tensor::from_vec(logits, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let l = labels(&[0, 1, 1, 1], 1, 2, 2);
        let out = dice_ce_loss(&x, &l, 1.0, 1.0).unwrap();
        let ce = -((0.8f64).ln() + (0.6f64).ln() + (0.9f64).ln() + (0.5f64).ln()) / 4.0;
        let e = DICE_EPS;
        // class 0: p0 = [0.8,0.4,0.1,0.5], g0 = [1,0,0,0]
        let d0 = (2.0 * 0.8 + e) / (1.8 + 1.0 + e);
        // class 1: p1 vs g1 = [0,1,1,1]
        let d1 = (2.0 * 2.0 + e) / (2.2 + 3.0 + e);
        let dice = 1.0 - (d0 + d1) / 2.0;
        assert!((out.value.ce_term - ce).abs() < 1e-12);
        assert!((out.value.dice_term - dice).abs() < 1e-12);
        assert!((out.value.total - (dice + ce)).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let l = labels(&[0, 1, 2, 1], 1, 2, 2);
        let oh = one_hot(&l, 3, DType::F64).unwrap();
        let x = (oh * 50.0).unwrap();
        let out = dice_ce_loss(&x, &l, 1.0, 1.0).unwrap();
        assert!(out.value.ce_term < 1e-12);
        assert!(out.value.dice_term < 1e-5);
    }

    #[test]
    fn nan_and_bad_labels_rejected() {
        let l = labels(&[0, 1, 0, 1], 1, 2, 2);
        let x = Tensor::full(f32::NAN, (1, 2, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(dice_ce_loss(&x, &l, 1.0, 1.0), Err(UdfaError::NonFinite(_))));
        let bad = labels(&[0, 1, 2, 1], 1, 2, 2);
        let z = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(dice_ce_loss(&z, &bad, 1.0, 1.0).is_err());
    }
}
