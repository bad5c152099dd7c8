use super::init::he_normal;
use super::{Decay, Params};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source pixel for output `(oy, ox)` at kernel tap `(ki, kj)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, plane: &[T], cols: &mut [T]) {
        let n_out = self.out_len();
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ki) * self.kw + kj) * n_out..][..n_out];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            row[oy * self.w_out + ox] = match self.source(oy, ox, ki, kj) {
                                Some((y, x)) => plane[(ci * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], plane: &mut [T]) {
        let n_out = self.out_len();
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * n_out..][..n_out];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, x)) = self.source(oy, ox, ki, kj) {
                                plane[(ci * self.h + y) * self.w + x] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of `x: N×Cin×H×W` with
/// `weight: Cout×Cin×kh×kw`, plus an optional per-output-channel bias.
/// Output extents are `floor((in + 2·padding − k) / stride) + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || weight.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels)",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} with padding {padding} and stride {stride} leaves no output"),
        });
    }
    let geo = Geometry {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (w + 2 * padding - kw) / stride + 1,
    };
    let (k, n_out, plane) = (geo.patch_len(), geo.out_len(), c_in * h * w);

    let xd = x.shared_data();
    let wd = weight.shared_data();
    let bd = bias.map(|b| b.shared_data());
    let mut out = vec![T::zero(); n * c_out * n_out];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * n_out]
    };
    for i in 0..n {
        let src = &xd[i * plane..(i + 1) * plane];
        let cols_ref: &[T] = if geo.is_pointwise() {
            src
        } else {
            geo.im2col(src, &mut cols);
            &cols
        };
        let dst = &mut out[i * c_out * n_out..(i + 1) * c_out * n_out];
        if let Some(b) = &bd {
            for (co, row) in dst.chunks_mut(n_out).enumerate() {
                row.fill(b[co]);
            }
        }
        T::gemm(
            c_out,
            k,
            n_out,
            T::one(),
            &wd,
            (k, 1),
            cols_ref,
            (n_out, 1),
            T::one(),
            dst,
            (n_out, 1),
        );
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (need_x, need_w, need_b) = (
        x.tracks_grad(),
        weight.tracks_grad(),
        bias.is_some_and(|b| b.tracks_grad()),
    );
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        out,
        vec![n, c_out, geo.h_out, geo.w_out],
        "conv2d",
        parents,
        move |g| {
            let mut gx = need_x.then(|| vec![T::zero(); n * plane]);
            let mut gw = need_w.then(|| vec![T::zero(); c_out * k]);
            let mut gb = need_b.then(|| vec![T::zero(); c_out]);
            let mut cols = vec![T::zero(); k * n_out];
            let mut dcols = vec![T::zero(); k * n_out];
            for i in 0..n {
                let gi = &g[i * c_out * n_out..(i + 1) * c_out * n_out];
                if let Some(gb) = gb.as_mut() {
                    for (co, row) in gi.chunks(n_out).enumerate() {
                        gb[co] += row.iter().copied().sum::<T>();
                    }
                }
                let src = &xd[i * plane..(i + 1) * plane];
                if let Some(gw) = gw.as_mut() {
                    let cols_ref: &[T] = if geo.is_pointwise() {
                        src
                    } else {
                        geo.im2col(src, &mut cols);
                        &cols
                    };
                    // dW += dY · colsᵀ
                    T::gemm(
                        c_out,
                        n_out,
                        k,
                        T::one(),
                        gi,
                        (n_out, 1),
                        cols_ref,
                        (1, n_out),
                        T::one(),
                        gw,
                        (k, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * plane..(i + 1) * plane];
                    // dcols = Wᵀ · dY
                    if geo.is_pointwise() {
                        T::gemm(
                            k,
                            c_out,
                            n_out,
                            T::one(),
                            &wd,
                            (1, k),
                            gi,
                            (n_out, 1),
                            T::zero(),
                            dst,
                            (n_out, 1),
                        );
                    } else {
                        T::gemm(
                            k,
                            c_out,
                            n_out,
                            T::one(),
                            &wd,
                            (1, k),
                            gi,
                            (n_out, 1),
                            T::zero(),
                            &mut dcols,
                            (n_out, 1),
                        );
                        geo.col2im_add(&dcols, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        },
    ))
}

/// Convolution parameters: weight `out_c × in_c × k × k` and optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialized weights, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            weight: he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng)?.requires_grad(),
            bias: if bias {
                Some(Tensor::zeros(&[out_channels])?.requires_grad())
            } else {
                None
            },
            stride: 1,
            padding,
        })
    }

    /// `kernel`×`kernel` convolution that preserves spatial extents.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        debug_assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self::new(in_channels, out_channels, kernel, kernel / 2, bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        f(&format!("{prefix}.weight"), &self.weight, Decay::Yes);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b, Decay::Yes);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        f(&format!("{prefix}.weight"), &mut self.weight, Decay::Yes);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b, Decay::Yes);
        }
    }
}
