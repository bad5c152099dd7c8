//! Index-loop reference implementations, written from the definitions
//! without any library tensor op, for comparing against the library.

#![allow(dead_code, clippy::needless_range_loop)]

use transattunet::attention::{Gsa, GsaSoftmaxAxis, Tsa};
use transattunet::nn::{Conv2d, ConvBlock};
use transattunet::{Scalar, Tensor};

/// Dense `N×C×H×W` array in f64.
#[derive(Clone, Debug)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "oracle arrays are rank 4");
        Self {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            data: t.to_f64_vec(),
        }
    }

    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.c + ch) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: f64) {
        let i = ((b * self.c + ch) * self.h + y) * self.w + x;
        self.data[i] = v;
    }

    /// Element `p` of the flattened `h·w` plane.
    pub fn flat(&self, b: usize, ch: usize, p: usize) -> f64 {
        self.at(b, ch, p / self.w, p % self.w)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Convolution by direct summation: zero padding, cross-correlation.
pub fn conv<T: Scalar>(x: &Arr, p: &Conv2d<T>) -> Arr {
    let wt = p.weight.to_f64_vec();
    let ws = p.weight.shape();
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ci, x.c);
    let (s, pad) = (p.stride, p.padding as isize);
    let ho = (x.h + 2 * p.padding - k) / s + 1;
    let wo = (x.w + 2 * p.padding - k) / s + 1;
    let bias = p.bias.as_ref().map(|b| b.to_f64_vec());
    let mut out = Arr::zeros(x.n, co, ho, wo);
    for b in 0..x.n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = (y * s + dy) as isize - pad;
                                let sx = (xx * s + dx) as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += wt[((o * ci + i) * k + dy) * k + dx] * x.at(b, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Batch-statistics normalization (biased variance), then `γ·x̂ + β`.
pub fn batch_norm(x: &Arr, gamma: &[f64], beta: &[f64], eps: f64) -> Arr {
    let mut out = x.clone();
    let count = (x.n * x.h * x.w) as f64;
    for ch in 0..x.c {
        let vals: Vec<f64> = (0..x.n)
            .flat_map(|b| (0..x.h * x.w).map(move |p| (b, p)))
            .map(|(b, p)| x.flat(b, ch, p))
            .collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, ch, y, xx) - mean) / (var + eps).sqrt();
                    out.set(b, ch, y, xx, gamma[ch] * v + beta[ch]);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Conv–norm–relu twice, normalization in train mode.
pub fn conv_block<T: Scalar>(x: &Arr, blk: &ConvBlock<T>) -> Arr {
    let norm = |a: &Arr, n: &Option<transattunet::nn::BatchNorm2d<T>>| match n {
        Some(n) => batch_norm(a, &n.gamma.to_f64_vec(), &n.beta.to_f64_vec(), n.eps),
        None => a.clone(),
    };
    let h = relu(&norm(&conv(x, &blk.conv1), &blk.norm1));
    relu(&norm(&conv(&h, &blk.conv2), &blk.norm2))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample(x: &Arr, ho: usize, wo: usize) -> Arr {
    let coord = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
    };
    let mut out = Arr::zeros(x.n, x.c, ho, wo);
    for b in 0..x.n {
        for ch in 0..x.c {
            for y in 0..ho {
                let (y0, y1, fy) = coord(y, x.h, ho);
                for xx in 0..wo {
                    let (x0, x1, fx) = coord(xx, x.w, wo);
                    let top = (1.0 - fx) * x.at(b, ch, y0, x0) + fx * x.at(b, ch, y0, x1);
                    let bot = (1.0 - fx) * x.at(b, ch, y1, x0) + fx * x.at(b, ch, y1, x1);
                    out.set(b, ch, y, xx, (1.0 - fy) * top + fy * bot);
                }
            }
        }
    }
    out
}

/// Channel concatenation.
pub fn cat(parts: &[&Arr]) -> Arr {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c = parts.iter().map(|p| p.c).sum();
    let mut out = Arr::zeros(n, c, h, w);
    for b in 0..n {
        let mut off = 0;
        for p in parts {
            assert_eq!((p.n, p.h, p.w), (n, h, w));
            for ch in 0..p.c {
                for y in 0..h {
                    for xx in 0..w {
                        out.set(b, off + ch, y, xx, p.at(b, ch, y, xx));
                    }
                }
            }
            off += p.c;
        }
    }
    out
}

/// Transformer self-attention with channels as tokens: per head, the
/// `c/heads` tokens of length `h·w` are projected, scored with
/// `QKᵀ/√(h·w)`, normalized over keys, and mixed. Returns the output and the
/// attention maps indexed `[b][head][t][u]`.
pub fn tsa<T: Scalar>(f: &Arr, m: &Tsa<T>) -> (Arr, Vec<Vec<Vec<Vec<f64>>>>) {
    let (c, hw) = (f.c, f.h * f.w);
    let heads = m.heads;
    let per = c / heads;
    let pos = m.pos_enc.to_f64_vec();
    let shared = m.w_q.rank() == 2;
    let (wq, wk, wv) = (m.w_q.to_f64_vec(), m.w_k.to_f64_vec(), m.w_v.to_f64_vec());
    let proj = |w: &[f64], hd: usize, p: usize, j: usize| {
        let base = if shared { 0 } else { hd * hw * hw };
        w[base + p * hw + j]
    };
    let mut out = Arr::zeros(f.n, c, f.h, f.w);
    let mut maps = Vec::new();
    for b in 0..f.n {
        let mut per_head = Vec::new();
        for hd in 0..heads {
            let tok = |t: usize, p: usize| f.flat(b, hd * per + t, p) + pos[(hd * per + t) * hw + p];
            let project = |w: &[f64]| -> Vec<Vec<f64>> {
                (0..per)
                    .map(|t| {
                        (0..hw)
                            .map(|j| (0..hw).map(|p| tok(t, p) * proj(w, hd, p, j)).sum())
                            .collect()
                    })
                    .collect()
            };
            let (q, k, v) = (project(&wq), project(&wk), project(&wv));
            let mut a = vec![vec![0.0; per]; per];
            for t in 0..per {
                for u in 0..per {
                    a[t][u] = (0..hw).map(|j| q[t][j] * k[u][j]).sum::<f64>() / (hw as f64).sqrt();
                }
                softmax_in_place(&mut a[t]);
            }
            for t in 0..per {
                for j in 0..hw {
                    let val: f64 = (0..per).map(|u| a[t][u] * v[u][j]).sum();
                    out.set(b, hd * per + t, j / f.w, j % f.w, val);
                }
            }
            per_head.push(a);
        }
        maps.push(per_head);
    }
    let out = match &m.out_proj {
        Some(p) => conv(&out, p),
        None => out,
    };
    (out, maps)
}

/// Global spatial attention: `E[i][j] = Σ_k N[k][i]·N[k][j]` from the
/// reduced projection, `B = softmax(E)` over the chosen index, and output
/// position `p` = `Σ_q W[:, q]·B[p][q]`. Returns the output and `B` indexed
/// `[b][i][j]`.
pub fn gsa<T: Scalar>(f: &Arr, m: &Gsa<T>) -> (Arr, Vec<Vec<Vec<f64>>>) {
    let hw = f.h * f.w;
    let nmap = conv(f, &m.proj_reduce);
    let wmap = conv(f, &m.proj_full);
    let mut out = Arr::zeros(f.n, f.c, f.h, f.w);
    let mut maps = Vec::new();
    for b in 0..f.n {
        let mut e = vec![vec![0.0; hw]; hw];
        for (i, row) in e.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..nmap.c).map(|k| nmap.flat(b, k, i) * nmap.flat(b, k, j)).sum();
            }
        }
        match m.softmax_axis {
            GsaSoftmaxAxis::Target => e.iter_mut().for_each(|row| softmax_in_place(row)),
            GsaSoftmaxAxis::Source => {
                for j in 0..hw {
                    let mut col: Vec<f64> = (0..hw).map(|i| e[i][j]).collect();
                    softmax_in_place(&mut col);
                    for i in 0..hw {
                        e[i][j] = col[i];
                    }
                }
            }
        }
        for ch in 0..f.c {
            for p in 0..hw {
                let v: f64 = (0..hw).map(|q| wmap.flat(b, ch, q) * e[p][q]).sum();
                out.set(b, ch, p / f.w, p % f.w, v);
            }
        }
        maps.push(e);
    }
    (out, maps)
}
