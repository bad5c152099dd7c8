//! Multi-scale skip connections over the decoder stage outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{upsample_bilinear, BatchNorm2d, ConvBlock, Decay, Mode, Params};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MscMode {
    /// Every stage upsampled to full resolution, concatenated once, fused once.
    Cascade,
    /// Stepwise: the previous fused result joins the current stage.
    #[default]
    Residual,
    /// Every earlier fused result joins each later stage.
    Dense,
    /// The last decoder stage feeds the head directly.
    None,
}

/// One decoder stage's features. Stages are numbered from 1 (coarsest);
/// `spatial_scale` is the divisor relative to the input resolution.
#[derive(Clone, Debug)]
pub struct DecoderStageOutput<T: Scalar> {
    pub stage_index: usize,
    pub features: Tensor<T>,
    pub spatial_scale: usize,
}

impl<T: Scalar> DecoderStageOutput<T> {
    fn extent(&self) -> (usize, usize) {
        (self.features.shape()[2], self.features.shape()[3])
    }
}

fn check_stages<T: Scalar>(op: &str, stages: &[DecoderStageOutput<T>]) -> Result<()> {
    if stages.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{op}: needs at least 2 decoder stages, got {}",
            stages.len()
        )));
    }
    for pair in stages.windows(2) {
        let ((h0, w0), (h1, w1)) = (pair[0].extent(), pair[1].extent());
        if (h1, w1) != (2 * h0, 2 * w0) || pair[0].spatial_scale != 2 * pair[1].spatial_scale {
            return Err(Error::InvalidInput(format!(
                "{op}: stage {} ({h0}×{w0}, 1/{}) is not one octave below stage {} ({h1}×{w1}, 1/{})",
                pair[0].stage_index, pair[0].spatial_scale, pair[1].stage_index, pair[1].spatial_scale
            )));
        }
    }
    Ok(())
}

fn check_fusers<T: Scalar>(op: &str, fuse: &[ConvBlock<T>], want: usize) -> Result<()> {
    if fuse.len() != want {
        return Err(Error::Config(format!(
            "{op}: {} fusion blocks for {want} fusion steps",
            fuse.len()
        )));
    }
    Ok(())
}

/// `f(υ₁(F₁) ⊕ … ⊕ υₙ₋₁(Fₙ₋₁) ⊕ Fₙ)` with every `υ` bilinear to full size.
pub fn msc_cascade<T: Scalar>(stages: &[DecoderStageOutput<T>], fuse: &ConvBlock<T>, mode: Mode) -> Result<Tensor<T>> {
    check_stages("msc_cascade", stages)?;
    let target = stages.last().expect("checked").extent();
    let ups = stages
        .iter()
        .map(|s| upsample_bilinear(&s.features, target))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = ups.iter().collect();
    fuse.forward(&Tensor::concat(&refs, 1)?, mode)
}

/// `R₁ = F₁`, `Rₙ = fₙ(Fₙ ⊕ υ(Rₙ₋₁))` with `υ` a one-octave bilinear step.
pub fn msc_residual<T: Scalar>(
    stages: &[DecoderStageOutput<T>],
    fuse: &[ConvBlock<T>],
    mode: Mode,
) -> Result<Tensor<T>> {
    check_stages("msc_residual", stages)?;
    check_fusers("msc_residual", fuse, stages.len() - 1)?;
    let mut acc = stages[0].features.clone();
    for (stage, f) in stages[1..].iter().zip(fuse) {
        let up = upsample_bilinear(&acc, stage.extent())?;
        acc = f.forward(&Tensor::concat(&[&stage.features, &up], 1)?, mode)?;
    }
    Ok(acc)
}

/// `G₁ = F₁`, `Gₙ = fₙ(Fₙ ⊕ υ(G₁) ⊕ … ⊕ υ(Gₙ₋₁))` with each `υ` bilinear
/// straight to stage `n`'s resolution.
pub fn msc_dense<T: Scalar>(stages: &[DecoderStageOutput<T>], fuse: &[ConvBlock<T>], mode: Mode) -> Result<Tensor<T>> {
    check_stages("msc_dense", stages)?;
    check_fusers("msc_dense", fuse, stages.len() - 1)?;
    let mut fused = vec![stages[0].features.clone()];
    for (stage, f) in stages[1..].iter().zip(fuse) {
        let mut parts = vec![stage.features.clone()];
        for g in &fused {
            parts.push(upsample_bilinear(g, stage.extent())?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        fused.push(f.forward(&Tensor::concat(&refs, 1)?, mode)?);
    }
    Ok(fused.pop().expect("at least two stages"))
}

/// The fusion blocks `fₙ` for one mode.
#[derive(Clone, Debug)]
pub struct Msc<T: Scalar> {
    pub mode: MscMode,
    pub fuse: Vec<ConvBlock<T>>,
}

impl<T: Scalar> Msc<T> {
    /// `widths` are the decoder stage channel counts, coarse to fine.
    pub fn new(mode: MscMode, widths: &[usize], use_norm: bool, rng: &mut Rng) -> Result<Self> {
        let last = *widths
            .last()
            .ok_or_else(|| Error::Config("msc: no decoder stages".into()))?;
        let fuse = match mode {
            MscMode::None => vec![],
            MscMode::Cascade => vec![ConvBlock::new(widths.iter().sum(), last, use_norm, rng)?],
            MscMode::Residual => (1..widths.len())
                .map(|n| ConvBlock::new(widths[n] + widths[n - 1], widths[n], use_norm, rng))
                .collect::<Result<_>>()?,
            MscMode::Dense => (1..widths.len())
                .map(|n| ConvBlock::new(widths[..=n].iter().sum(), widths[n], use_norm, rng))
                .collect::<Result<_>>()?,
        };
        Ok(Self { mode, fuse })
    }

    pub fn forward(&self, stages: &[DecoderStageOutput<T>], mode: Mode) -> Result<Tensor<T>> {
        match self.mode {
            MscMode::None => Ok(stages
                .last()
                .ok_or_else(|| Error::InvalidInput("msc: no decoder stages".into()))?
                .features
                .clone()),
            MscMode::Cascade => msc_cascade(stages, &self.fuse[0], mode),
            MscMode::Residual => msc_residual(stages, &self.fuse, mode),
            MscMode::Dense => msc_dense(stages, &self.fuse, mode),
        }
    }
}

impl<T: Scalar> Params<T> for Msc<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        self.fuse.visit(&format!("{prefix}.fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        self.fuse.visit_norms(&format!("{prefix}.fuse"), f);
    }
}
