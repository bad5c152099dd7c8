//! Convolutional building blocks: convolution, pooling, bilinear
//! upsampling, batch normalization, and the conv–norm–relu block.

mod block;
mod conv;
pub mod init;
mod norm;
mod pool;
mod upsample;

pub use block::ConvBlock;
pub use conv::{conv2d, Conv2d};
pub use norm::{BatchNorm2d, RunningStats};
pub use pool::maxpool2d;
pub(crate) use upsample::resample_planes;
pub use upsample::upsample_bilinear;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

/// Whether weight decay applies to a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Yes,
    No,
}

/// Named traversal over learnable parameters and normalization layers.
/// Names are dot-separated paths rooted at the given prefix.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay));

    fn visit_norms(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {}
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        if let Some(p) = self {
            p.visit_norms(prefix, f);
        }
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit_norms(&format!("{prefix}.{i}"), f);
        }
    }
}
