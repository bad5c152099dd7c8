use std::sync::Arc;

use super::softmax::axis_extents;
use super::{needs, numel_of, validate_shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// For each output position of a permutation, the flat input index it reads.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel_of(shape);
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            coord[d] += 1;
            offset += strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    map
}

impl<T: Scalar> Tensor<T> {
    /// Reinterprets the data under a new shape; no copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        validate_shape("reshape", shape)?;
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_shared(
            self.shared_data(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidAxis {
                    op: "permute",
                    axis: p,
                    rank,
                });
            }
        }
        if perm.len() != rank {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("permutation {perm:?} has wrong length"),
            });
        }
        let map: Arc<[usize]> = permute_map(self.shape(), perm).into();
        let x = self.data();
        let data = map.iter().map(|&i| x[i]).collect();
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::from_op(data, shape, "permute", vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for (o, &i) in map.iter().enumerate() {
                dx[i] = g[o];
            }
            vec![Some(dx)]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: a.max(b),
                rank: self.rank(),
            });
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        for t in &inputs[1..] {
            let same_rest = t.rank() == rank && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !same_rest {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let widths: Vec<usize> = inputs.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();

        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();

        let wanted: Vec<bool> = inputs.iter().map(|t| needs(*t)).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            inputs.iter().map(|t| (*t).clone()).collect(),
            move |g| {
                let mut parts: Vec<Option<Vec<T>>> = widths
                    .iter()
                    .zip(&wanted)
                    .map(|(&w, &want)| want.then(|| Vec::with_capacity(outer * w)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (part, &w) in parts.iter_mut().zip(&widths) {
                        if let Some(p) = part {
                            p.extend_from_slice(&g[pos..pos + w]);
                        }
                        pos += w;
                    }
                }
                parts
            },
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape: self.shape().to_vec(),
                reason: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let (outer, _, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full = self.numel();
        Ok(Tensor::from_op(data, shape, "narrow", vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); full];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn iota(shape: &[usize]) -> T64 {
        T64::from_vec((0..numel_of(shape)).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn reshape_round_trip_is_exact() {
        let x = iota(&[3, 2, 4]);
        let back = x.reshape(&[3, 8]).unwrap().reshape(&[3, 2, 4]).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.data(), x.data());
        assert!(x.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn transpose_2d() {
        let x = iota(&[2, 3]);
        let y = x.transpose(0, 1).unwrap();
        assert_eq!(y.shape(), [3, 2]);
        assert_eq!(y.to_vec(), [0., 3., 1., 4., 2., 5.]);
        assert_eq!(y.transpose(0, 1).unwrap().data(), x.data());
    }

    #[test]
    fn permute_3d_backward_routes_exactly() {
        let x = iota(&[2, 3, 4]).requires_grad();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), [4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let w = T64::from_vec((0..24).map(|v| v as f64 * 10.0).collect(), &[4, 2, 3]).unwrap();
        y.mul(&w).unwrap().sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[12 + 2 * 4 + 1], w.data()[6 + 3 + 2]);
    }

    #[test]
    fn concat_channel_axis_shape() {
        let a = T64::ones(&[2, 2, 4, 4]).unwrap();
        let b = T64::zeros(&[2, 3, 4, 4]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), [2, 5, 4, 4]);
        assert_eq!(c.data()[0], 1.0);
        assert_eq!(c.data()[2 * 16], 0.0);
        assert_eq!(c.data()[5 * 16], 1.0);
    }

    #[test]
    fn concat_backward_splits_all_ones() {
        let a = T64::ones(&[1, 2, 2, 2]).unwrap().requires_grad();
        let b = T64::ones(&[1, 3, 2, 2]).unwrap().requires_grad();
        Tensor::concat(&[&a, &b], 1).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 8]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 12]);
    }

    #[test]
    fn concat_rejects_extent_mismatch() {
        let a = T64::ones(&[1, 2, 2, 2]).unwrap();
        let b = T64::ones(&[1, 2, 3, 2]).unwrap();
        assert!(matches!(Tensor::concat(&[&a, &b], 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn narrow_inverts_concat() {
        let a = iota(&[2, 2, 3]);
        let b = iota(&[2, 1, 3]).add_scalar(100.0).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).unwrap().data(), b.data());
    }
}
