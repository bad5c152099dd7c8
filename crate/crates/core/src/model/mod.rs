//! The segmentation network: U-Net encoder, self-aware attention at the
//! bottleneck, decoder, multi-scale skip fusion, and a sigmoid head.

mod msc;

pub use msc::{msc_cascade, msc_dense, msc_residual, DecoderStageOutput, Msc, MscMode};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{GsaSoftmaxAxis, Saa, SaaOptions, TsaOptions};
use crate::data::check_divisible;
use crate::data::image::{write_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::nn::{maxpool2d, upsample_bilinear, BatchNorm2d, Conv2d, ConvBlock, Decay, Mode, Params, RunningStats};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{is_checked, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub heads: usize,
    pub msc_mode: MscMode,
    pub use_tsa: bool,
    pub use_gsa: bool,
    pub use_norm: bool,
    pub tsa_out_proj: bool,
    pub share_qkv: bool,
    pub gsa_softmax_axis: GsaSoftmaxAxis,
    /// `[height, width]` of the inputs; fixes the positional encoding size.
    pub image_size: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            heads: 8,
            msc_mode: MscMode::Residual,
            use_tsa: true,
            use_gsa: true,
            use_norm: true,
            tsa_out_proj: true,
            share_qkv: false,
            gsa_softmax_axis: GsaSoftmaxAxis::Source,
            image_size: [64, 64],
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Plain U-Net: no attention, no multi-scale fusion.
    pub fn vanilla_unet() -> Self {
        Self {
            use_tsa: false,
            use_gsa: false,
            msc_mode: MscMode::None,
            ..Self::default()
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.image_size[0] >> self.depth, self.image_size[1] >> self.depth)
    }

    /// Decoder stage widths, coarse to fine.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth).rev().map(|i| self.base_channels << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 || self.heads == 0 {
            return bad("in_channels, base_channels, depth and heads must be positive".into());
        }
        if self.depth > 12 {
            return bad(format!("depth {} is unreasonably large", self.depth));
        }
        check_divisible(self.image_size[0], self.image_size[1], self.depth)
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        let c = self.bottleneck_channels();
        let k = self.heads.max(8);
        if !c.is_multiple_of(k) {
            return bad(format!(
                "bottleneck width {c} (base_channels·2^depth) must be divisible by max(heads, 8) = {k}"
            ));
        }
        if self.msc_mode != MscMode::None && self.depth < 2 {
            return bad(format!("msc_mode {:?} needs depth ≥ 2", self.msc_mode));
        }
        Ok(())
    }

    fn saa_options(&self) -> SaaOptions {
        SaaOptions {
            use_tsa: self.use_tsa,
            use_gsa: self.use_gsa,
            tsa: TsaOptions {
                heads: self.heads,
                share_qkv: self.share_qkv,
                out_proj: self.tsa_out_proj,
            },
            gsa_softmax_axis: self.gsa_softmax_axis,
        }
    }
}

/// A named parameter or buffer as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Every learnable parameter and normalization buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    pub params: Vec<NamedArray>,
    /// `<norm>.running_mean` / `<norm>.running_var`; absent before the first
    /// train step.
    pub buffers: Vec<NamedArray>,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    /// Encoder block outputs, finest first.
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
    pub saa: Tensor<T>,
    /// Decoder stage outputs, coarsest first.
    pub decoder: Vec<DecoderStageOutput<T>>,
    /// Input to the head: the multi-scale fusion, or the last decoder stage.
    pub fused: Tensor<T>,
    pub logits: Tensor<T>,
    pub prob: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TransAttUnet<T: Scalar> {
    cfg: ModelConfig,
    pub encoder: Vec<ConvBlock<T>>,
    pub bottleneck: ConvBlock<T>,
    pub saa: Saa<T>,
    pub decoder: Vec<ConvBlock<T>>,
    pub msc: Msc<T>,
    pub head: Conv2d<T>,
}

fn checked<T: Scalar>(t: Tensor<T>, stage: &str) -> Result<Tensor<T>> {
    if is_checked() {
        t.check_finite(stage)?;
    }
    Ok(t)
}

impl<T: Scalar> TransAttUnet<T> {
    /// Builds the model with parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let rng = &mut rng;
        let base = cfg.base_channels;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut in_c = cfg.in_channels;
        for i in 0..cfg.depth {
            encoder.push(ConvBlock::new(in_c, base << i, cfg.use_norm, rng)?);
            in_c = base << i;
        }
        let bottleneck = ConvBlock::new(in_c, cfg.bottleneck_channels(), cfg.use_norm, rng)?;
        let saa = Saa::new(cfg.bottleneck_channels(), cfg.bottleneck_size(), cfg.saa_options(), rng)?;
        let decoder = (0..cfg.depth)
            .rev()
            .map(|i| ConvBlock::new((base << (i + 1)) + (base << i), base << i, cfg.use_norm, rng))
            .collect::<Result<Vec<_>>>()?;
        let msc = Msc::new(cfg.msc_mode, &cfg.stage_widths(), cfg.use_norm, rng)?;
        let head = Conv2d::new(base, 1, 1, 0, true, rng)?;
        Ok(Self {
            cfg,
            encoder,
            bottleneck,
            saa,
            decoder,
            msc,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1] != self.cfg.in_channels {
            return Err(Error::InvalidInput(format!(
                "model expects N×{}×H×W input, got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        check_divisible(h, w, self.cfg.depth)?;
        if self.cfg.use_tsa && [h, w] != self.cfg.image_size {
            return Err(Error::InvalidInput(format!(
                "model with TSA was built for {}×{} inputs, got {h}×{w}",
                self.cfg.image_size[0], self.cfg.image_size[1]
            )));
        }
        Ok(())
    }

    /// Encoder block outputs (finest first) and the bottleneck features.
    pub fn encoder_forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            let s = checked(block.forward(&h, mode)?, &format!("encoder.{i}"))?;
            h = maxpool2d(&s, 2, 2)?;
            skips.push(s);
        }
        let b = checked(self.bottleneck.forward(&h, mode)?, "bottleneck")?;
        Ok((skips, b))
    }

    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardTrace<T>> {
        let (skips, bottleneck) = self.encoder_forward(x, mode)?;
        let saa = checked(self.saa.forward(&bottleneck)?, "saa")?;
        let depth = self.cfg.depth;
        let mut decoder = Vec::with_capacity(depth);
        let mut prev = saa.clone();
        for (k, block) in self.decoder.iter().enumerate() {
            let skip = &skips[depth - 1 - k];
            prev = checked(decoder_stage(&prev, skip, block, mode)?, &format!("decoder.{k}"))?;
            decoder.push(DecoderStageOutput {
                stage_index: k + 1,
                features: prev.clone(),
                spatial_scale: 1 << (depth - 1 - k),
            });
        }
        let fused = checked(self.msc.forward(&decoder, mode)?, "msc")?;
        let logits = checked(self.head.forward(&fused)?, "head")?;
        let prob = checked(logits.sigmoid()?, "output")?;
        Ok(ForwardTrace {
            skips,
            bottleneck,
            saa,
            decoder,
            fused,
            logits,
            prob,
        })
    }

    /// Foreground probabilities, `N×1×H×W`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x, mode)?.prob)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>, Decay)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, d| out.push((name.to_string(), t.clone(), d)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.visit("", &mut |_, t, _| t.zero_grad());
    }

    /// Replaces parameters in [`Self::named_params`] order.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t, _| {
            if let Some(v) = values.get(i) {
                if v.shape() == t.shape() {
                    *t = v.clone();
                } else if err.is_none() {
                    err = Some(Error::InvalidInput(format!(
                        "set_params: {name} has shape {:?}, value has {:?}",
                        t.shape(),
                        v.shape()
                    )));
                }
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != values.len() {
            return Err(Error::InvalidInput(format!(
                "set_params: {} values for {i} parameters",
                values.len()
            )));
        }
        Ok(())
    }

    pub fn norms(&self) -> Vec<(String, BatchNorm2d<T>)> {
        let mut out = Vec::new();
        self.visit_norms("", &mut |name, n| out.push((name.to_string(), n.clone())));
        out
    }

    pub fn state(&self) -> ModelState {
        let params = self
            .named_params()
            .into_iter()
            .map(|(name, t, _)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            })
            .collect();
        let mut buffers = Vec::new();
        self.visit_norms("", &mut |name, n| {
            if let Some(s) = n.running_stats() {
                for (suffix, v) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                    buffers.push(NamedArray {
                        name: format!("{name}.{suffix}"),
                        shape: vec![v.len()],
                        data: v.iter().map(|x| x.to_f64_lossy()).collect(),
                    });
                }
            }
        });
        ModelState { params, buffers }
    }

    /// Loads a state whose parameter names and shapes match this model
    /// exactly. Norm layers without buffers in `state` get their running
    /// statistics cleared.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        let mut by_name: BTreeMap<&str, &NamedArray> = state.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut err: Option<Error> = None;
        self.visit_mut("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => err = Some(Error::InvalidInput(format!("state is missing parameter {name}"))),
                Some(p) if p.shape != t.shape() => {
                    err = Some(Error::InvalidInput(format!(
                        "parameter {name}: state shape {:?}, model shape {:?}",
                        p.shape,
                        t.shape()
                    )))
                }
                Some(p) => match Tensor::from_vec(p.data.iter().map(|&v| T::from_f64_lossy(v)).collect(), &p.shape) {
                    Ok(v) => *t = v.requires_grad(),
                    Err(e) => err = Some(e),
                },
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::InvalidInput(format!("state has unknown parameter {extra}")));
        }
        let buffers: BTreeMap<&str, &NamedArray> = state.buffers.iter().map(|b| (b.name.as_str(), b)).collect();
        let mut used = 0;
        let mut results = Vec::new();
        self.visit_norms("", &mut |name, n| {
            let mean = buffers.get(format!("{name}.running_mean").as_str()).copied();
            let var = buffers.get(format!("{name}.running_var").as_str()).copied();
            let stats = match (mean, var) {
                (Some(m), Some(v)) => {
                    used += 2;
                    Some(RunningStats {
                        mean: m.data.iter().map(|&x| T::from_f64_lossy(x)).collect(),
                        var: v.data.iter().map(|&x| T::from_f64_lossy(x)).collect(),
                    })
                }
                (None, None) => None,
                _ => {
                    results.push(Err(Error::InvalidInput(format!(
                        "norm {name}: incomplete running statistics"
                    ))));
                    None
                }
            };
            results.push(
                n.set_running_stats(stats)
                    .map_err(|e| Error::InvalidInput(format!("norm {name}: {e}"))),
            );
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
        if used != state.buffers.len() {
            return Err(Error::InvalidInput("state has buffers for unknown norm layers".into()));
        }
        Ok(())
    }

    /// The same model in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<TransAttUnet<U>> {
        let mut m = TransAttUnet::<U>::new(self.cfg.clone())?;
        m.load_state(&self.state())?;
        Ok(m)
    }

    /// Writes `stage_<k>.pgm` for every decoder stage (k = 1 is the
    /// coarsest): the channel-mean activation of batch item 0, min-max
    /// scaled to `[0, 255]`. A constant map is written as all zeros.
    pub fn export_activations(&self, x: &Tensor<T>, mode: Mode, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let trace = self.forward_trace(x, mode)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut written = Vec::new();
        for stage in &trace.decoder {
            let f = &stage.features;
            let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
            let item0 = &f.data()[..c * h * w];
            let mean: Vec<f64> = (0..h * w)
                .map(|p| (0..c).map(|ch| item0[ch * h * w + p].to_f64_lossy()).sum::<f64>() / c as f64)
                .collect();
            let img = GrayImage::new(h, w, normalize_to_u8(&mean))?;
            let path = out_dir.join(format!("stage_{}.pgm", stage.stage_index));
            write_pgm(&path, &img)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Min-max scaling to `[0, 255]`; a constant input maps to all zeros.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Upsamples `prev` one octave, concatenates `skip`, and applies `block`.
pub fn decoder_stage<T: Scalar>(
    prev: &Tensor<T>,
    skip: &Tensor<T>,
    block: &ConvBlock<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if prev.rank() != 4
        || skip.rank() != 4
        || skip.shape()[2] != 2 * prev.shape()[2]
        || skip.shape()[3] != 2 * prev.shape()[3]
    {
        return Err(Error::ShapeMismatch {
            op: "decoder_stage (skip must be twice the previous extent)",
            lhs: prev.shape().to_vec(),
            rhs: skip.shape().to_vec(),
        });
    }
    let up = upsample_bilinear(prev, (skip.shape()[2], skip.shape()[3]))?;
    block.forward(&Tensor::concat(&[skip, &up], 1)?, mode)
}

impl<T: Scalar> Params<T> for TransAttUnet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit(&p("encoder"), f);
        self.bottleneck.visit(&p("bottleneck"), f);
        self.saa.visit(&p("saa"), f);
        self.decoder.visit(&p("decoder"), f);
        self.msc.visit(&p("msc"), f);
        self.head.visit(&p("head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit_mut(&p("encoder"), f);
        self.bottleneck.visit_mut(&p("bottleneck"), f);
        self.saa.visit_mut(&p("saa"), f);
        self.decoder.visit_mut(&p("decoder"), f);
        self.msc.visit_mut(&p("msc"), f);
        self.head.visit_mut(&p("head"), f);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit_norms(&p("encoder"), f);
        self.bottleneck.visit_norms(&p("bottleneck"), f);
        self.decoder.visit_norms(&p("decoder"), f);
        self.msc.visit_norms(&p("msc"), f);
    }
}
