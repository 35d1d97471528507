//! Segmentation and text losses with analytic gradients with respect to the
//! pixel logits, plus the weighted composition of the training objective.

use serde::{Deserialize, Serialize};

use crate::decoder::logistic;
use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Weights of the training objective. `Default` holds the reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub txt: f64,
    pub mask: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            txt: 1.0,
            mask: 1.0,
            bce: 2.0,
            dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("txt", self.txt), ("mask", self.mask), ("bce", self.bce), ("dice", self.dice)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Optimizer settings of the reference training run. Recorded only; no
/// training loop consumes them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConstants {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub epochs: usize,
}

impl Default for OptimizerConstants {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 2,
            grad_accumulation: 10,
            epochs: 4,
        }
    }
}

/// Pixel probabilities with the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl SoftMask {
    pub fn from_logits(height: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != height * width {
            return Err(Error::invalid("logit buffer disagrees with mask shape"));
        }
        if logits.iter().any(|z| z.is_nan()) {
            return Err(Error::invalid("logits contain NaN"));
        }
        let probs = logits.iter().map(|&z| logistic(z)).collect();
        Ok(Self {
            height,
            width,
            logits,
            probs,
        })
    }

    /// Inverts the logistic; exact 0 and 1 map to infinite logits.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        let logits: Vec<f64> = probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        let mut mask = Self::from_logits(height, width, logits)?;
        mask.probs.copy_from_slice(probs);
        Ok(mask)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// A loss value and its gradient with respect to each pixel logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(pred: &SoftMask, gt: &BinaryMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "prediction is {:?}, ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy computed from logits.
pub fn bce_loss(pred: &SoftMask, gt: &BinaryMask) -> Result<LossWithGrad> {
    check_shapes(pred, gt)?;
    let n = pred.logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.logits.len());
    for ((&z, &p), &g) in pred.logits.iter().zip(&pred.probs).zip(gt.bits()) {
        let target = if g { 1.0 } else { 0.0 };
        total += if z.is_infinite() {
            if (z > 0.0) == g { 0.0 } else { f64::INFINITY }
        } else {
            // -[g ln s(z) + (1-g) ln(1-s(z))] = max(z,0) - z g + ln(1 + e^-|z|)
            z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
        };
        grad.push((p - target) / n);
    }
    Ok(LossWithGrad {
        value: total / n,
        grad,
    })
}

/// Smoothed soft Dice loss `1 - (2 sum pg + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &SoftMask, gt: &BinaryMask, eps: f64) -> Result<LossWithGrad> {
    check_shapes(pred, gt)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("dice smoothing must be finite and > 0"));
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred.probs.iter().zip(gt.bits()) {
        psum += p;
        if g {
            inter += p;
            gsum += 1.0;
        }
    }
    let num = 2.0 * inter + eps;
    let den = psum + gsum + eps;
    let grad = pred
        .probs
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let target = if g { 1.0 } else { 0.0 };
            let d_prob = -(2.0 * target * den - num) / (den * den);
            d_prob * p * (1.0 - p)
        })
        .collect();
    Ok(LossWithGrad {
        value: 1.0 - num / den,
        grad,
    })
}

/// Mean negative log-softmax of the target entry at each position.
/// `logits` is `targets.len() x vocab`, row-major.
pub fn text_ce_loss(logits: &[f64], vocab: usize, targets: &[usize]) -> Result<f64> {
    if vocab == 0 || targets.is_empty() {
        return Err(Error::invalid("cross-entropy needs at least one position and token"));
    }
    if logits.len() != vocab * targets.len() {
        return Err(Error::invalid(format!(
            "{} logits for {} positions of vocabulary {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t >= vocab {
            return Err(Error::invalid(format!("target id {t} outside vocabulary of {vocab}")));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

pub fn mask_loss(bce: f64, dice: f64, w: &LossWeights) -> f64 {
    w.bce * bce + w.dice * dice
}

pub fn total_loss(txt: f64, mask: f64, w: &LossWeights) -> f64 {
    w.txt * txt + w.mask * mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        BinaryMask::from_row_strings(rows).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let pred = SoftMask::from_logits(2, 2, vec![0.0; 4]).unwrap();
        for gt in [mask(&["00", "00"]), mask(&["10", "01"]), mask(&["11", "11"])] {
            let l = bce_loss(&pred, &gt).unwrap();
            assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_near_perfect_prediction_is_bounded_by_eps() {
        let gt = mask(&["101", "010"]);
        let mut last = f64::INFINITY;
        for eps in [1e-1f64, 1e-2, 1e-4, 1e-8] {
            let z = ((1.0 - eps) / eps).ln();
            let logits = gt.bits().iter().map(|&g| if g { z } else { -z }).collect();
            let l = bce_loss(&SoftMask::from_logits(2, 3, logits).unwrap(), &gt).unwrap();
            assert!(l.value <= -(1.0 - eps).ln() + 1e-12);
            assert!(l.value < last);
            last = l.value;
        }
    }

    #[test]
    fn dice_edge_values() {
        let gt = mask(&["110", "001"]);
        let probs: Vec<f64> = gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let exact = SoftMask::from_probabilities(2, 3, &probs).unwrap();
        assert_eq!(dice_loss(&exact, &gt, 1.0).unwrap().value, 0.0);
        let empty = SoftMask::from_probabilities(2, 3, &[0.0; 6]).unwrap();
        assert_eq!(dice_loss(&empty, &mask(&["000", "000"]), 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn dice_is_not_complement_symmetric() {
        let gt = mask(&["110", "000"]);
        let pred = SoftMask::from_logits(2, 3, vec![2.0, -1.0, 0.5, -3.0, 1.0, 0.0]).unwrap();
        let flipped_gt = BinaryMask::new(2, 3, gt.bits().iter().map(|b| !b).collect()).unwrap();
        let flipped_pred = SoftMask::from_logits(2, 3, pred.logits().iter().map(|z| -z).collect()).unwrap();
        let a = dice_loss(&pred, &gt, 1.0).unwrap().value;
        let b = dice_loss(&flipped_pred, &flipped_gt, 1.0).unwrap().value;
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let pred = SoftMask::from_logits(1, 2, vec![0.0; 2]).unwrap();
        assert!(bce_loss(&pred, &mask(&["0"])).is_err());
        assert!(dice_loss(&pred, &mask(&["0"]), 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let v = text_ce_loss(&[0.3; 8], 4, &[0, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let v = text_ce_loss(&[margin, 0.0, 0.0], 3, &[0]).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-20);
        assert!(text_ce_loss(&[0.0; 4], 4, &[4]).is_err());
    }

    #[test]
    fn weighted_composition() {
        let w = LossWeights::default();
        assert!((mask_loss(0.693147, 0.2, &w) - 1.486294).abs() < 1e-12);
        assert!((total_loss(1.0, 1.486294, &w) - 2.486294).abs() < 1e-12);
        let zero = LossWeights { txt: 0.0, mask: 0.0, bce: 0.0, dice: 0.0 };
        assert_eq!(mask_loss(3.0, 4.0, &zero), 0.0);
        let bce_only = LossWeights { bce: 1.0, dice: 0.0, ..w };
        assert_eq!(mask_loss(0.37, 0.9, &bce_only), 0.37);
        let txt_only = LossWeights { mask: 0.0, ..w };
        assert_eq!(total_loss(1.25, 8.0, &txt_only), 1.25);
        let (a, b) = ((0.5, 0.25), (1.5, 2.0));
        let lhs = total_loss(a.0 + b.0, a.1 + b.1, &w);
        assert!((lhs - total_loss(a.0, a.1, &w) - total_loss(b.0, b.1, &w)).abs() < 1e-12);
    }
}
