use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(outer, len, inner)` extents around `axis`.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }

        let saved: std::sync::Arc<[T]> = y.clone().into();
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            move |g| {
                // dx = y ⊙ (g − ⟨g, y⟩) per slice
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|j| g[base + j * inner] * saved[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = saved[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}
