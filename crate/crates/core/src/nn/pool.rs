use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling over `window×window` patches at `stride`. The gradient goes to
/// the first (row-major) maximal element of each window.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            shape: x.shape().to_vec(),
            reason: "expected N×C×H×W".into(),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if window == 0 || stride == 0 || h % stride != 0 || w % stride != 0 || h < window || w < window {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            shape: x.shape().to_vec(),
            reason: format!("spatial extents must be divisible by stride {stride} and cover window {window}"),
        });
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        // strict comparison keeps the first maximum
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let argmax: Arc<[usize]> = argmax.into();
    let len = x.numel();
    Ok(Tensor::from_op(
        out,
        vec![n, c, ho, wo],
        "maxpool2d",
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); len];
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] += gi;
            }
            vec![Some(dx)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, randn, GradcheckConfig};
    use crate::rng::Rng;

    type T64 = Tensor<f64>;

    #[test]
    fn picks_window_max() {
        let x = T64::from_vec(vec![1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().to_vec(), [4.]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = T64::full(&[1, 1, 4, 4], 3.0).unwrap().requires_grad();
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), [3.0; 4]);
        y.sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| g[i] == 1.0).collect();
        assert_eq!(hot, [0, 2, 8, 10]);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn indivisible_extent_is_an_error() {
        let x = T64::ones(&[1, 1, 5, 4]).unwrap();
        assert!(maxpool2d(&x, 2, 2).is_err());
    }

    #[test]
    fn gradcheck_tie_free() {
        let mut rng = Rng::new(5);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let probe = randn(&[2, 3, 2, 2], &mut rng);
        let r = gradcheck(
            |x| Ok(maxpool2d(x, 2, 2)?.mul(&probe)?.sum_all()),
            &x,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
