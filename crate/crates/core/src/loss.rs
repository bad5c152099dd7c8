//! Training objective: weighted pixel-wise binary cross entropy plus a
//! smoothed Sørensen–Dice loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the Dice term.
    pub beta: f64,
    /// Dice smoothing.
    pub epsilon: f64,
    /// Probabilities are clamped to `[clamp_eps, 1 − clamp_eps]` before the log.
    pub clamp_eps: f64,
    /// 2 for the usual Dice; 1 reproduces the unscaled overlap ratio.
    pub dice_numerator_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            epsilon: 1e-6,
            clamp_eps: 1e-7,
            dice_numerator_factor: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be ≥ 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        if !(self.dice_numerator_factor > 0.0) {
            return Err(Error::Config("dice_numerator_factor must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &'static str, p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if let Some(v) = y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidInput(format!("{op}: target value {v} is not 0 or 1")));
    }
    Ok(())
}

/// `−mean(y·log p + (1−y)·log(1−p))` over every element, with `p` clamped.
pub fn bce_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_pair("bce_loss", p, y)?;
    let ce = T::from_f64_lossy(cfg.clamp_eps);
    let pc = p.clamp(ce, T::one() - ce)?;
    let pos = y.mul(&pc.log()?)?;
    let neg = y.one_minus()?.mul(&pc.one_minus()?.log()?)?;
    pos.add(&neg)?.mean_all().neg()
}

/// `1 − (k·Σyp + ε)/(Σy + Σp + ε)`. Rank-4 inputs are `N×…` batches: the
/// loss is computed per image and averaged; other ranks are one image.
pub fn dice_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_pair("dice_loss", p, y)?;
    let n = if p.rank() == 4 { p.shape()[0] } else { 1 };
    let per = p.numel() / n;
    let (p2, y2) = (p.reshape(&[n, per])?, y.reshape(&[n, per])?);
    let eps = T::from_f64_lossy(cfg.epsilon);
    let inter = p2.mul(&y2)?.sum(&[1])?;
    let total = p2.sum(&[1])?.add(&y2.sum(&[1])?)?;
    let num = inter
        .scale(T::from_f64_lossy(cfg.dice_numerator_factor))?
        .add_scalar(eps)?;
    let den = total.add_scalar(eps)?;
    num.div(&den)?.one_minus()?.mean(&[0])
}

/// `α·BCE + β·Dice`.
pub fn combined_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let bce = bce_loss(p, y, cfg)?.scale(T::from_f64_lossy(cfg.alpha))?;
    let dice = dice_loss(p, y, cfg)?.scale(T::from_f64_lossy(cfg.beta))?;
    bce.add(&dice)
}
