use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Decay, Params};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which index of the position-pair map the softmax normalizes over.
///
/// With `E[i, j] = M_i · N_j`, `Source` normalizes over `i` (every column of
/// `E` sums to one) and `Target` over `j` (every row sums to one).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsaSoftmaxAxis {
    #[default]
    Source,
    Target,
}

impl GsaSoftmaxAxis {
    /// Softmax axis of the `N×hw×hw` map.
    pub fn axis(self) -> usize {
        match self {
            GsaSoftmaxAxis::Source => 1,
            GsaSoftmaxAxis::Target => 2,
        }
    }
}

/// Global spatial attention.
///
/// Two 1×1 projections produce `c' = c/8` and `c` channel maps. The reduced
/// map gives `M` (`hw×c'`) and `N` (`c'×hw`); the full map gives `W`
/// (`c×hw`). The position map is `B = softmax(M·N)` and output position `p`
/// is `Σ_q W[:, q]·B[p, q]`, i.e. `W·Bᵀ`.
#[derive(Clone, Debug)]
pub struct Gsa<T: Scalar> {
    pub proj_reduce: Conv2d<T>,
    pub proj_full: Conv2d<T>,
    pub softmax_axis: GsaSoftmaxAxis,
}

impl<T: Scalar> Gsa<T> {
    pub fn new(channels: usize, softmax_axis: GsaSoftmaxAxis, rng: &mut Rng) -> Result<Self> {
        if channels < 8 || !channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "GSA needs a channel count divisible by 8, got {channels}"
            )));
        }
        Ok(Self {
            proj_reduce: Conv2d::new(channels, channels / 8, 1, 0, true, rng)?,
            proj_full: Conv2d::new(channels, channels, 1, 0, true, rng)?,
            softmax_axis,
        })
    }

    pub fn forward(&self, f_en: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(f_en)?.0)
    }

    /// Output and the position map `B` (`N×hw×hw`).
    pub fn forward_with_attention(&self, f_en: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if f_en.rank() != 4 || f_en.shape()[1] != self.proj_full.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "gsa",
                lhs: f_en.shape().to_vec(),
                rhs: self.proj_full.weight.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (f_en.shape()[0], f_en.shape()[1], f_en.shape()[2], f_en.shape()[3]);
        let hw = h * w;
        let c_red = self.proj_reduce.out_channels();

        let n_map = self.proj_reduce.forward(f_en)?.reshape(&[n, c_red, hw])?;
        let m_map = n_map.transpose(1, 2)?;
        let w_map = self.proj_full.forward(f_en)?.reshape(&[n, c, hw])?;
        let b = m_map.matmul(&n_map)?.softmax(self.softmax_axis.axis())?;
        let out = w_map.matmul(&b.transpose(1, 2)?)?.reshape(&[n, c, h, w])?;
        Ok((out, b))
    }
}

impl<T: Scalar> Params<T> for Gsa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        self.proj_reduce.visit(&format!("{prefix}.proj_reduce"), f);
        self.proj_full.visit(&format!("{prefix}.proj_full"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        self.proj_reduce.visit_mut(&format!("{prefix}.proj_reduce"), f);
        self.proj_full.visit_mut(&format!("{prefix}.proj_full"), f);
    }
}
