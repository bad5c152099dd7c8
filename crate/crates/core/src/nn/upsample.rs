use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One output coordinate's interpolation: `w0·src[i0] + w1·src[i1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-center taps: `src = (dst + 0.5)·(n_in/n_out) − 0.5`, clamped
/// to `[0, n_in − 1]`.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Resamples every `h×w` plane of `planes` to `out_h×out_w`.
pub(crate) fn resample_planes<T: Scalar>(
    planes: &[T],
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let ty: Vec<(usize, usize, T, T)> = ty
        .iter()
        .map(|t| (t.i0, t.i1, T::from_f64_lossy(t.w0), T::from_f64_lossy(t.w1)))
        .collect();
    let tx: Vec<(usize, usize, T, T)> = tx
        .iter()
        .map(|t| (t.i0, t.i1, T::from_f64_lossy(t.w0), T::from_f64_lossy(t.w1)))
        .collect();
    let n_planes = planes.len() / (h * w);
    let mut out = Vec::with_capacity(n_planes * out_h * out_w);
    for p in planes.chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let (r0, r1) = (&p[y0 * w..(y0 + 1) * w], &p[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    out
}

/// Transpose of [`resample_planes`]: scatters output gradients back.
fn resample_planes_transpose<T: Scalar>(grads: &[T], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Vec<T> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let n_planes = grads.len() / (out_h * out_w);
    let mut dx = vec![T::zero(); n_planes * h * w];
    for (g, d) in grads.chunks(out_h * out_w).zip(dx.chunks_mut(h * w)) {
        for (oy, t_y) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(t_y.w0), T::from_f64_lossy(t_y.w1));
            for (ox, t_x) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(t_x.w0), T::from_f64_lossy(t_x.w1));
                let gi = g[oy * out_w + ox];
                d[t_y.i0 * w + t_x.i0] += gi * wy0 * wx0;
                d[t_y.i0 * w + t_x.i1] += gi * wy0 * wx1;
                d[t_y.i1 * w + t_x.i0] += gi * wy1 * wx0;
                d[t_y.i1 * w + t_x.i1] += gi * wy1 * wx1;
            }
        }
    }
    dx
}

/// Bilinear upsampling of `N×C×h×w` to `N×C×H×W` with half-pixel centers
/// (the `align_corners = false` convention). Downscaling is rejected.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "upsample_bilinear",
            shape: x.shape().to_vec(),
            reason: "expected N×C×H×W".into(),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_h, out_w) = target;
    if out_h < h || out_w < w {
        return Err(Error::InvalidShape {
            op: "upsample_bilinear",
            shape: x.shape().to_vec(),
            reason: format!("target {out_h}x{out_w} would downscale"),
        });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let data = resample_planes(x.data(), (h, w), target);
    Ok(Tensor::from_op(
        data,
        vec![n, c, out_h, out_w],
        "upsample_bilinear",
        vec![x.clone()],
        move |g| vec![Some(resample_planes_transpose(g, (h, w), (out_h, out_w)))],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, randn, GradcheckConfig};
    use crate::rng::Rng;

    type T64 = Tensor<f64>;

    #[test]
    fn hand_evaluated_coordinate_map() {
        let x = T64::from_vec(vec![0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        let y = upsample_bilinear(&x, (1, 4)).unwrap();
        assert_eq!(y.to_vec(), [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = T64::full(&[2, 3, 2, 3], 1.75).unwrap();
        let y = upsample_bilinear(&x, (8, 9)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn ramp_is_reproduced_at_interior_points() {
        // x-ramp v(j) = 2j + 1 on 4 columns; upsample by 2.
        let x = T64::from_vec((0..4).map(|j| 2.0 * j as f64 + 1.0).collect(), &[1, 1, 1, 4]).unwrap();
        let y = upsample_bilinear(&x, (1, 8)).unwrap();
        for (d, &v) in y.data().iter().enumerate() {
            let src = (d as f64 + 0.5) * 0.5 - 0.5;
            if (0.0..=3.0).contains(&src) {
                assert!((v - (2.0 * src + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integer_factor_preserves_spatial_mean() {
        let mut rng = Rng::new(8);
        let x = randn(&[1, 2, 3, 4], &mut rng);
        for f in [2, 4] {
            let y = upsample_bilinear(&x, (3 * f, 4 * f)).unwrap();
            let mx = x.mean(&[2, 3]).unwrap();
            let my = y.mean(&[2, 3]).unwrap();
            for (a, b) in mx.data().iter().zip(my.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downscale_is_rejected() {
        let x = T64::ones(&[1, 1, 4, 4]).unwrap();
        assert!(upsample_bilinear(&x, (2, 4)).is_err());
    }

    #[test]
    fn backward_is_transpose_of_interpolation_matrix() {
        // Build the interpolation matrix column by column and compare with
        // the gradient of ⟨probe, upsample(x)⟩, which is Mᵀ·probe.
        let (h, w, oh, ow) = (2, 3, 5, 7);
        let mut rng = Rng::new(6);
        let probe = randn(&[1, 1, oh, ow], &mut rng);
        let x = randn(&[1, 1, h, w], &mut rng).requires_grad();
        upsample_bilinear(&x, (oh, ow))
            .unwrap()
            .mul(&probe)
            .unwrap()
            .sum_all()
            .backward()
            .unwrap();
        let g = x.grad().unwrap();
        for j in 0..h * w {
            let mut e = vec![0.0; h * w];
            e[j] = 1.0;
            let col = upsample_bilinear(&T64::from_vec(e, &[1, 1, h, w]).unwrap(), (oh, ow)).unwrap();
            let want: f64 = col.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            assert!((g[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_random() {
        let mut rng = Rng::new(7);
        let x = randn(&[2, 2, 3, 2], &mut rng);
        let probe = randn(&[2, 2, 6, 4], &mut rng);
        let r = gradcheck(
            |x| Ok(upsample_bilinear(x, (6, 4))?.mul(&probe)?.sum_all()),
            &x,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
