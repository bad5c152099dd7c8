use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    Sum,
    Mean,
}

/// Output shape and, for every input element, the output slot it feeds.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let keep: Vec<bool> = (0..rank).map(|d| !axes.contains(&d)).collect();
    let mut out_shape: Vec<usize> = (0..rank).filter(|&d| keep[d]).map(|d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let n: usize = shape.iter().product();
    let mut slots = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        let mut slot = 0;
        for d in 0..rank {
            if keep[d] {
                slot = slot * shape[d] + coord[d];
            }
        }
        slots.push(slot);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (out_shape, slots)
}

impl<T: Scalar> Tensor<T> {
    fn reduce(&self, axes: &[usize], kind: Reduction) -> Result<Tensor<T>> {
        let op = match kind {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.rank() || axes[..i].contains(&a) {
                return Err(Error::InvalidAxis {
                    op,
                    axis: a,
                    rank: self.rank(),
                });
            }
        }
        let (out_shape, slots) = reduction_plan(self.shape(), axes);
        let out_len: usize = out_shape.iter().product();
        let count = self.numel() / out_len;
        let mut out = vec![T::zero(); out_len];
        for (&v, &s) in self.data().iter().zip(&slots) {
            out[s] += v;
        }
        let factor = match kind {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::from_usize(count).expect("count fits"),
        };
        if kind == Reduction::Mean {
            out.iter_mut().for_each(|v| *v *= factor);
        }
        let slots: Arc<[usize]> = slots.into();
        Ok(Tensor::from_op(out, out_shape, op, vec![self.clone()], move |g| {
            vec![Some(slots.iter().map(|&s| g[s] * factor).collect())]
        }))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(axes, Reduction::Sum)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(axes, Reduction::Mean)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&axes, Reduction::Sum).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&axes, Reduction::Mean).expect("all axes are valid")
    }
}
