use super::{needs, numel_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product over the last two axes.
    ///
    /// `self` is `[..batch, m, k]` and `rhs` is `[..rbatch, k, n]`, where
    /// `rbatch` must be a suffix of `batch` (possibly empty). The right
    /// operand repeats over the leading batch axes it lacks, which is how
    /// per-head projection weights are shared across a minibatch.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(mismatch());
        }
        let (ls, rs) = (self.shape(), rhs.shape());
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let lbatch = &ls[..ls.len() - 2];
        let rbatch = &rs[..rs.len() - 2];
        if k != k2 || rbatch.len() > lbatch.len() || !lbatch.ends_with(rbatch) {
            return Err(mismatch());
        }
        let nb = numel_of(lbatch);
        let nrb = numel_of(rbatch);

        let a = self.shared_data();
        let b = rhs.shared_data();
        let mut c = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let bj = bi % nrb;
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &b[bj * k * n..(bj + 1) * k * n],
                (n, 1),
                T::zero(),
                &mut c[bi * m * n..(bi + 1) * m * n],
                (n, 1),
            );
        }

        let mut shape = lbatch.to_vec();
        shape.extend([m, n]);
        let (need_a, need_b) = (needs(self), needs(rhs));
        Ok(Tensor::from_op(
            c,
            shape,
            "matmul",
            vec![self.clone(), rhs.clone()],
            move |g| {
                // dA = dC·Bᵀ
                let ga = need_a.then(|| {
                    let mut ga = vec![T::zero(); nb * m * k];
                    for bi in 0..nb {
                        let bj = bi % nrb;
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &b[bj * k * n..(bj + 1) * k * n],
                            (1, n),
                            T::zero(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            (k, 1),
                        );
                    }
                    ga
                });
                // dB = Aᵀ·dC, summed over the batches that shared B
                let gb = need_b.then(|| {
                    let mut gb = vec![T::zero(); nrb * k * n];
                    for bi in 0..nb {
                        let bj = bi % nrb;
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &a[bi * m * k..(bi + 1) * m * k],
                            (1, k),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            T::one(),
                            &mut gb[bj * k * n..(bj + 1) * k * n],
                            (n, 1),
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn t(v: &[f64], shape: &[usize]) -> T64 {
        T64::from_vec(v.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let eye = t(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        let m = t(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[3, 3]);
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn hand_arithmetic() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[1., 1.], &[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), [2, 1]);
        assert_eq!(c.to_vec(), [3., 7.]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_matches_transpose_formulas() {
        // sum(A·B): dA = 1·Bᵀ (row sums of B), dB = Aᵀ·1 (column sums of A).
        let a = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]).requires_grad();
        let b = t(&[1., -1., 0.5, 2., -3., 0.], &[3, 2]).requires_grad();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), [0., 2.5, -3., 0., 2.5, -3.]);
        assert_eq!(b.grad().unwrap(), [5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn shared_rhs_accumulates_over_batch() {
        let a = T64::ones(&[4, 2, 3]).unwrap();
        let w = T64::ones(&[3, 2]).unwrap().requires_grad();
        let c = a.matmul(&w).unwrap();
        assert_eq!(c.shape(), [4, 2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
        c.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![8.0; 6]);
    }
}
