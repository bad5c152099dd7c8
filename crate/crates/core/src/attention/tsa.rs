use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{he_normal, normal};
use crate::nn::{Conv2d, Decay, Params};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsaOptions {
    pub heads: usize,
    /// One set of Q/K/V projections shared by every head.
    pub share_qkv: bool,
    /// 1×1 convolution combining the concatenated heads.
    pub out_proj: bool,
}

impl Default for TsaOptions {
    /// Eight heads with separate projections and the output projection.
    fn default() -> Self {
        Self {
            heads: 8,
            share_qkv: false,
            out_proj: true,
        }
    }
}

/// Transformer self attention over a `c×h×w` bottleneck.
///
/// Channels are the tokens: each head owns `c/heads` consecutive channels,
/// each token is a flattened `h·w` row, and the projections are `(h·w)×(h·w)`
/// right-multiplications. The attention map per head is
/// `softmax(Q·Kᵀ/√(h·w))` of size `(c/heads)×(c/heads)`, normalized over the
/// key axis.
#[derive(Clone, Debug)]
pub struct Tsa<T: Scalar> {
    /// Learnable positional encoding added before projection, `c×h×w`.
    pub pos_enc: Tensor<T>,
    /// `heads×hw×hw`, or `hw×hw` when shared.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
    pub out_proj: Option<Conv2d<T>>,
}

impl<T: Scalar> Tsa<T> {
    pub fn new(channels: usize, (h, w): (usize, usize), opts: TsaOptions, rng: &mut Rng) -> Result<Self> {
        if opts.heads == 0 || !channels.is_multiple_of(opts.heads) {
            return Err(Error::Config(format!(
                "TSA: {channels} channels cannot be split into {} heads",
                opts.heads
            )));
        }
        let hw = h * w;
        let proj_shape: Vec<usize> = if opts.share_qkv {
            vec![hw, hw]
        } else {
            vec![opts.heads, hw, hw]
        };
        let pos_enc = normal(&[channels, h, w], 0.02, rng)?.requires_grad();
        let mut proj = || -> Result<Tensor<T>> { Ok(he_normal(&proj_shape, hw, rng)?.requires_grad()) };
        let (w_q, w_k, w_v) = (proj()?, proj()?, proj()?);
        let out_proj = if opts.out_proj {
            Some(Conv2d::new(channels, channels, 1, 0, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            pos_enc,
            w_q,
            w_k,
            w_v,
            heads: opts.heads,
            out_proj,
        })
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(f)?.0)
    }

    /// Output and the attention maps `N×heads×(c/heads)×(c/heads)`.
    pub fn forward_with_attention(&self, f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if f.rank() != 4 || f.shape()[1..] != *self.pos_enc.shape() {
            return Err(Error::ShapeMismatch {
                op: "tsa (positional encoding)",
                lhs: f.shape().to_vec(),
                rhs: self.pos_enc.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        if c % self.heads != 0 {
            return Err(Error::Config(format!("TSA: {c} channels, {} heads", self.heads)));
        }
        let hw = h * w;
        let per_head = c / self.heads;

        let tokens = f.add(&self.pos_enc)?.reshape(&[n, self.heads, per_head, hw])?;
        let q = tokens.matmul(&self.w_q)?;
        let k = tokens.matmul(&self.w_k)?;
        let v = tokens.matmul(&self.w_v)?;
        let scale = T::one() / T::from_usize(hw).expect("hw fits").sqrt();
        let scores = q.matmul(&k.transpose(2, 3)?)?.scale(scale)?;
        let attn = scores.softmax(3)?;
        let mut out = attn.matmul(&v)?.reshape(&[n, c, h, w])?;
        if let Some(p) = &self.out_proj {
            out = p.forward(&out)?;
        }
        Ok((out, attn))
    }
}

impl<T: Scalar> Params<T> for Tsa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        f(&format!("{prefix}.pos_enc"), &self.pos_enc, Decay::Yes);
        f(&format!("{prefix}.w_q"), &self.w_q, Decay::Yes);
        f(&format!("{prefix}.w_k"), &self.w_k, Decay::Yes);
        f(&format!("{prefix}.w_v"), &self.w_v, Decay::Yes);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        f(&format!("{prefix}.pos_enc"), &mut self.pos_enc, Decay::Yes);
        f(&format!("{prefix}.w_q"), &mut self.w_q, Decay::Yes);
        f(&format!("{prefix}.w_k"), &mut self.w_k, Decay::Yes);
        f(&format!("{prefix}.w_v"), &mut self.w_v, Decay::Yes);
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::randn;

    fn opts(heads: usize) -> TsaOptions {
        TsaOptions {
            heads,
            share_qkv: false,
            out_proj: false,
        }
    }

    #[test]
    fn zero_queries_and_keys_average_the_channels() {
        let (c, h, w) = (4, 2, 3);
        let mut tsa = Tsa::<f64>::new(c, (h, w), opts(1), &mut Rng::new(0)).unwrap();
        let hw = h * w;
        let mut eye = vec![0.0; hw * hw];
        (0..hw).for_each(|i| eye[i * hw + i] = 1.0);
        tsa.w_q = Tensor::zeros(&[1, hw, hw]).unwrap();
        tsa.w_k = Tensor::zeros(&[1, hw, hw]).unwrap();
        tsa.w_v = Tensor::from_vec(eye, &[1, hw, hw]).unwrap();
        tsa.pos_enc = Tensor::zeros(&[c, h, w]).unwrap();

        let f = randn(&[2, c, h, w], &mut Rng::new(1));
        let (out, attn) = tsa.forward_with_attention(&f).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let mean = f.mean(&[1]).unwrap();
        for b in 0..2 {
            for ch in 0..c {
                for p in 0..hw {
                    let got = out.data()[(b * c + ch) * hw + p];
                    assert!((got - mean.data()[b * hw + p]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(Tsa::<f32>::new(12, (2, 2), opts(8), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn positional_encoding_shape_must_match() {
        let tsa = Tsa::<f32>::new(8, (2, 2), opts(8), &mut Rng::new(0)).unwrap();
        let f = Tensor::<f32>::ones(&[1, 8, 4, 4]).unwrap();
        assert!(matches!(tsa.forward(&f), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn shared_projection_shapes() {
        let o = TsaOptions {
            share_qkv: true,
            ..opts(4)
        };
        let tsa = Tsa::<f32>::new(8, (3, 3), o, &mut Rng::new(0)).unwrap();
        assert_eq!(tsa.w_q.shape(), [9, 9]);
        let f = Tensor::<f32>::ones(&[2, 8, 3, 3]).unwrap();
        let (out, attn) = tsa.forward_with_attention(&f).unwrap();
        assert_eq!(out.shape(), [2, 8, 3, 3]);
        assert_eq!(attn.shape(), [2, 4, 2, 2]);
    }
}
