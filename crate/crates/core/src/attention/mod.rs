//! Self-aware attention bottleneck: transformer self attention (TSA), global
//! spatial attention (GSA) and their learnable weighted fusion with the
//! encoder features.

mod gsa;
mod tsa;

pub use gsa::{Gsa, GsaSoftmaxAxis};
pub use tsa::{Tsa, TsaOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Decay, Params};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fusion weights, each a `[1]` tensor starting at exactly zero.
#[derive(Clone, Debug)]
pub struct FusionParams<T: Scalar> {
    pub lambda1: Option<Tensor<T>>,
    pub lambda2: Option<Tensor<T>>,
}

/// `λ₁·F_tsa + λ₂·F_gsa + F_en`. A missing branch contributes nothing.
pub fn saa_fuse<T: Scalar>(
    f_en: &Tensor<T>,
    f_tsa: Option<&Tensor<T>>,
    f_gsa: Option<&Tensor<T>>,
    p: &FusionParams<T>,
) -> Result<Tensor<T>> {
    let mut terms = Vec::with_capacity(2);
    for (f, lambda, name) in [(f_tsa, &p.lambda1, "lambda1"), (f_gsa, &p.lambda2, "lambda2")] {
        let Some(f) = f else { continue };
        if f.shape() != f_en.shape() {
            return Err(Error::ShapeMismatch {
                op: "saa_fuse",
                lhs: f_en.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        let lambda = lambda
            .as_ref()
            .ok_or_else(|| Error::Config(format!("saa_fuse: branch present but {name} missing")))?;
        terms.push(f.mul(lambda)?);
    }
    let mut acc: Option<Tensor<T>> = None;
    for t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => a.add(&t)?,
        });
    }
    match acc {
        Some(a) => a.add(f_en),
        None => Ok(f_en.clone()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaaOptions {
    pub use_tsa: bool,
    pub use_gsa: bool,
    pub tsa: TsaOptions,
    pub gsa_softmax_axis: GsaSoftmaxAxis,
}

impl Default for SaaOptions {
    fn default() -> Self {
        Self {
            use_tsa: true,
            use_gsa: true,
            tsa: TsaOptions::default(),
            gsa_softmax_axis: GsaSoftmaxAxis::default(),
        }
    }
}

/// The bottleneck block. Disabled branches own no parameters at all.
#[derive(Clone, Debug)]
pub struct Saa<T: Scalar> {
    pub tsa: Option<Tsa<T>>,
    pub gsa: Option<Gsa<T>>,
    pub fusion: FusionParams<T>,
}

impl<T: Scalar> Saa<T> {
    pub fn new(channels: usize, spatial: (usize, usize), opts: SaaOptions, rng: &mut Rng) -> Result<Self> {
        let tsa = opts
            .use_tsa
            .then(|| Tsa::new(channels, spatial, opts.tsa, rng))
            .transpose()?;
        let gsa = opts
            .use_gsa
            .then(|| Gsa::new(channels, opts.gsa_softmax_axis, rng))
            .transpose()?;
        let lambda = |on: bool| -> Result<Option<Tensor<T>>> {
            on.then(|| Ok(Tensor::zeros(&[1])?.requires_grad())).transpose()
        };
        Ok(Self {
            fusion: FusionParams {
                lambda1: lambda(opts.use_tsa)?,
                lambda2: lambda(opts.use_gsa)?,
            },
            tsa,
            gsa,
        })
    }

    pub fn forward(&self, f_en: &Tensor<T>) -> Result<Tensor<T>> {
        let f_tsa = self.tsa.as_ref().map(|t| t.forward(f_en)).transpose()?;
        let f_gsa = self.gsa.as_ref().map(|g| g.forward(f_en)).transpose()?;
        saa_fuse(f_en, f_tsa.as_ref(), f_gsa.as_ref(), &self.fusion)
    }
}

impl<T: Scalar> Params<T> for Saa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        self.tsa.visit(&format!("{prefix}.tsa"), f);
        self.gsa.visit(&format!("{prefix}.gsa"), f);
        if let Some(l) = &self.fusion.lambda1 {
            f(&format!("{prefix}.lambda1"), l, Decay::No);
        }
        if let Some(l) = &self.fusion.lambda2 {
            f(&format!("{prefix}.lambda2"), l, Decay::No);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        self.tsa.visit_mut(&format!("{prefix}.tsa"), f);
        self.gsa.visit_mut(&format!("{prefix}.gsa"), f);
        if let Some(l) = &mut self.fusion.lambda1 {
            f(&format!("{prefix}.lambda1"), l, Decay::No);
        }
        if let Some(l) = &mut self.fusion.lambda2 {
            f(&format!("{prefix}.lambda2"), l, Decay::No);
        }
    }
}
