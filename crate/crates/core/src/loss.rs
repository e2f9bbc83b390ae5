//! Segmentation losses, metrics, and the composite bitwidth-regularized loss.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::graph::{Tape, Var, BCE_EPS};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const MASK_THRESHOLD: f64 = 0.5;

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return contract_err(format!(
            "{what}: prediction shape {:?} differs from target shape {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same(pred, target, "bce_loss")?;
    if pred.is_empty() {
        return contract_err("bce_loss on an empty tensor");
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = y.as_f64();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub(crate) fn bce_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: f64,
) -> Tensor<T> {
    let n = pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.as_f64();
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return T::ZERO;
            }
            let y = y.as_f64();
            T::lit(upstream * (-y / p + (1.0 - y) / (1.0 - p)) / n)
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

struct DiceSums {
    inter: f64,
    pred: f64,
    target: f64,
}

fn dice_sums<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> DiceSums {
    let mut s = DiceSums {
        inter: 0.0,
        pred: 0.0,
        target: 0.0,
    };
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p.as_f64(), t.as_f64());
        s.inter += p * t;
        s.pred += p;
        s.target += t;
    }
    s
}

/// Soft Dice loss on probabilities.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    check_same(pred, target, "dice_loss")?;
    if smooth <= 0.0 {
        return contract_err("dice smoothing constant must be positive");
    }
    let s = dice_sums(pred, target);
    Ok(1.0 - (2.0 * s.inter + smooth) / (s.pred + s.target + smooth))
}

pub(crate) fn dice_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
    upstream: f64,
) -> Tensor<T> {
    let s = dice_sums(pred, target);
    let num = 2.0 * s.inter + smooth;
    let den = s.pred + s.target + smooth;
    let data = target
        .data()
        .iter()
        .map(|&t| T::lit(-upstream * (2.0 * t.as_f64() * den - num) / (den * den)))
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

/// Binarizes probabilities: 1 where `p > 0.5`.
pub fn threshold<T: Scalar>(pred: &Tensor<T>) -> Tensor<T> {
    pred.map(|p| {
        if p.as_f64() > MASK_THRESHOLD {
            T::ONE
        } else {
            T::ZERO
        }
    })
}

/// Smoothed Dice coefficient of two binary masks.
pub fn dice_coeff<T: Scalar>(
    pred_mask: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<f64> {
    check_same(pred_mask, target, "dice_coeff")?;
    let s = dice_sums(pred_mask, target);
    Ok((2.0 * s.inter + smooth) / (s.pred + s.target + smooth))
}

/// Fraction of elements where the two binary masks agree.
pub fn pixel_accuracy<T: Scalar>(pred_mask: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same(pred_mask, target, "pixel_accuracy")?;
    if pred_mask.is_empty() {
        return contract_err("pixel_accuracy on an empty tensor");
    }
    let agree = pred_mask
        .data()
        .iter()
        .zip(target.data())
        .filter(|(p, t)| (p.as_f64() > MASK_THRESHOLD) == (t.as_f64() > MASK_THRESHOLD))
        .count();
    Ok(agree as f64 / pred_mask.len() as f64)
}

/// The components of the composite loss for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    /// Average clamped weight bitwidth.
    pub bitwidth: f64,
    pub lambda: f64,
    pub total: f64,
    /// Pixels the BCE mean runs over.
    pub pixels: usize,
    pub smooth: f64,
}

impl LossBreakdown {
    /// Builds a breakdown; `total` is always `bce + dice + lambda * bitwidth`
    /// evaluated in that order.
    pub fn new(bce: f64, dice: f64, bitwidth: f64, lambda: f64, pixels: usize) -> Self {
        Self {
            bce,
            dice,
            bitwidth,
            lambda,
            total: compose_total(bce, dice, bitwidth, lambda),
            pixels,
            smooth: DEFAULT_SMOOTH,
        }
    }

    pub fn bitwidth_term(&self) -> f64 {
        self.lambda * self.bitwidth
    }

    pub fn is_finite(&self) -> bool {
        self.bce.is_finite()
            && self.dice.is_finite()
            && self.bitwidth.is_finite()
            && self.total.is_finite()
    }

    /// Weighted mean of breakdowns; the total is recomposed from the averaged
    /// components so the decomposition identity keeps holding exactly.
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> Option<Self> {
        let first = items.first()?.0;
        let wsum: f64 = items.iter().map(|(_, w)| w).sum();
        if wsum <= 0.0 {
            return None;
        }
        let mean =
            |f: fn(&LossBreakdown) -> f64| items.iter().map(|(b, w)| f(b) * w).sum::<f64>() / wsum;
        let pixels = items.iter().map(|(b, _)| b.pixels).sum();
        let mut out = Self::new(
            mean(|b| b.bce),
            mean(|b| b.dice),
            mean(|b| b.bitwidth),
            first.lambda,
            pixels,
        );
        out.smooth = first.smooth;
        Some(out)
    }
}

pub fn compose_total(bce: f64, dice: f64, bitwidth: f64, lambda: f64) -> f64 {
    bce + dice + lambda * bitwidth
}

/// Composite loss on a tape. Without bitwidth leaves (floating-point
/// baseline) the regularizer term is omitted and `bitwidth` reports 0.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    bits: &[Var],
    lambda: f64,
    smooth: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return contract_err(format!("lambda must be non-negative, got {lambda}"));
    }
    let bce = tape.bce_loss(pred, target)?;
    let dice = tape.dice_loss(pred, target, smooth)?;
    let bce_v = bce_loss(tape.value(pred), tape.value(target))?;
    let dice_v = dice_loss(tape.value(pred), tape.value(target), smooth)?;
    let pixels = tape.value(pred).len();
    let (total, bitwidth) = if bits.is_empty() {
        (tape.weighted_sum(&[(bce, 1.0), (dice, 1.0)])?, 0.0)
    } else {
        let avg = tape.avg_bitwidth(bits)?;
        let params: Vec<_> = bits
            .iter()
            .map(|&b| crate::quant::QuantParams::new(tape.value(b).data()[0].as_f64()))
            .collect();
        let bw = crate::quant::avg_bitwidth(&params)?;
        (
            tape.weighted_sum(&[(bce, 1.0), (dice, 1.0), (avg, lambda)])?,
            bw,
        )
    };
    let mut breakdown = LossBreakdown::new(bce_v, dice_v, bitwidth, lambda, pixels);
    breakdown.smooth = smooth;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let half = Tensor::<f64>::full([10], 0.5);
        let y = t(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert!((bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&t(&[0.9, 0.1]), &t(&[1.0, 0.0])).unwrap();
        assert!((v - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((v - 0.105361).abs() < 1e-6);
        assert!(bce_loss(&y, &y).unwrap() <= 1e-6);
        assert!(matches!(
            bce_loss(&t(&[0.5]), &y),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn dice_loss_examples() {
        let ones = Tensor::<f64>::ones([16]);
        assert_eq!(dice_loss(&ones, &ones, DEFAULT_SMOOTH).unwrap(), 0.0);
        let zeros = Tensor::<f64>::zeros([16]);
        assert_eq!(dice_loss(&zeros, &zeros, DEFAULT_SMOOTH).unwrap(), 0.0);
        let a = Tensor::<f64>::from_fn([16], |i| (i < 8) as u8 as f64);
        let b = Tensor::<f64>::from_fn([16], |i| (i >= 8) as u8 as f64);
        let v = dice_loss(&a, &b, DEFAULT_SMOOTH).unwrap();
        assert!((v - (1.0 - 1e-5 / 16.00001)).abs() < 1e-12);
        assert!((v - 0.99999938).abs() < 1e-8);
    }

    #[test]
    fn dice_coeff_examples() {
        let a = Tensor::<f64>::from_fn([16], |i| (i < 8) as u8 as f64);
        assert_eq!(dice_coeff(&a, &a, DEFAULT_SMOOTH).unwrap(), 1.0);
        let b = Tensor::<f64>::from_fn([16], |i| (4..12).contains(&i) as u8 as f64);
        let d = dice_coeff(&a, &b, DEFAULT_SMOOTH).unwrap();
        assert!((d - (8.0 + 1e-5) / (16.0 + 1e-5)).abs() < 1e-15);
        assert!((d - 0.5000003).abs() < 1e-7);
        let c = Tensor::<f64>::from_fn([16], |i| (i >= 8) as u8 as f64);
        assert!(dice_coeff(&a, &c, DEFAULT_SMOOTH).unwrap() < 1e-6);
    }

    #[test]
    fn pixel_accuracy_examples() {
        let a = t(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &t(&[0.0, 1.0, 0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &t(&[1.0, 0.0, 1.0, 1.0])).unwrap(), 0.75);
    }

    #[test]
    fn total_arithmetic() {
        let b = LossBreakdown::new(0.5, 0.3, 4.0, 0.25, 1);
        assert!((b.total - 1.8).abs() < 1e-15);
        assert_eq!(b.bitwidth_term(), 1.0);
        let b0 = LossBreakdown::new(0.5, 0.3, 4.0, 0.0, 1);
        assert_eq!(b0.total, 0.5 + 0.3);
        assert_eq!(b.total, b.bce + b.dice + b.lambda * b.bitwidth);
    }

    #[test]
    fn dice_duality_on_binary_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = Tensor::<f64>::from_fn([64], |_| rng.gen_bool(0.3) as u8 as f64);
            let q = Tensor::<f64>::from_fn([64], |_| rng.gen_bool(0.4) as u8 as f64);
            let l = dice_loss(&p, &q, DEFAULT_SMOOTH).unwrap();
            let c = dice_coeff(&p, &q, DEFAULT_SMOOTH).unwrap();
            assert_eq!(l, 1.0 - c);
            assert!(bce_loss(&p.map(|v| v * 0.8 + 0.1), &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_on_tape_with_regularizer() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.param(Tensor::full([1, 1, 2, 2], 0.5));
        let target = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let bits: Vec<Var> = (0..23).map(|_| tape.param(Tensor::scalar(4.0))).collect();
        let (total, b) = total_loss(&mut tape, pred, target, &bits, 0.25, DEFAULT_SMOOTH).unwrap();
        assert_eq!(b.bitwidth_term(), 1.0);
        assert_eq!(tape.value(total).data()[0], b.total);
        let g = tape.backward(total).unwrap();
        for &v in &bits {
            assert_eq!(g.get(v).unwrap().data()[0], 0.25 / 23.0);
        }
    }
}
