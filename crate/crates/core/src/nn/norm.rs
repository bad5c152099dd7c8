use std::sync::{Arc, Mutex};

use super::{Decay, Mode, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel batch normalization over `N×C×H×W`.
///
/// In train mode the batch statistics normalize the input and are folded
/// into the running estimates (`running ← (1−m)·running + m·batch`, using the
/// unbiased batch variance). Running estimates start at mean 0 / variance 1
/// on the first train step; eval mode before that is an error.
#[derive(Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    running: Mutex<Option<RunningStats<T>>>,
}

impl<T: Scalar> Clone for BatchNorm2d<T> {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            momentum: self.momentum,
            eps: self.eps,
            running: Mutex::new(self.running_stats()),
        }
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?.requires_grad(),
            beta: Tensor::zeros(&[channels])?.requires_grad(),
            momentum: 0.1,
            eps: 1e-5,
            running: Mutex::new(None),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_stats(&self) -> Option<RunningStats<T>> {
        self.running.lock().expect("running stats lock").clone()
    }

    pub fn set_running_stats(&self, stats: Option<RunningStats<T>>) -> Result<()> {
        if let Some(s) = &stats {
            let c = self.channels();
            if s.mean.len() != c || s.var.len() != c {
                return Err(Error::InvalidInput(format!(
                    "running stats for {c} channels have lengths {} and {}",
                    s.mean.len(),
                    s.var.len()
                )));
            }
            if s.var.iter().any(|v| *v < T::zero()) {
                return Err(Error::InvalidInput("running variance must be non-negative".into()));
            }
        }
        *self.running.lock().expect("running stats lock") = stats;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "norm2d",
                lhs: x.shape().to_vec(),
                rhs: self.gamma.shape().to_vec(),
            });
        }
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = self.running_stats().ok_or_else(|| {
            Error::InvalidInput("norm2d: eval mode before any train step (running statistics unset)".into())
        })?;
        let eps = T::from_f64_lossy(self.eps);
        let c = self.channels();
        let mean = Tensor::from_vec(stats.mean, &[c])?;
        let inv_std = Tensor::from_vec(stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(), &[c])?;
        x.sub(&mean)?.mul(&inv_std)?.mul(&self.gamma)?.add(&self.beta)
    }

    fn forward_train(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let count = n * hw;
        let m = T::from_usize(count).expect("count fits");
        let eps = T::from_f64_lossy(self.eps);
        let xd = x.data();
        let at = move |b: usize, ch: usize| (b * c + ch) * hw;

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[at(b, ch)..at(b, ch) + hw].iter().copied().sum::<T>();
            }
            mean[ch] = s / m;
            let mut ss = T::zero();
            for b in 0..n {
                ss += xd[at(b, ch)..at(b, ch) + hw]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
            var[ch] = ss / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let gamma = self.gamma.shared_data();
        let beta = self.beta.data();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = at(b, ch)..at(b, ch) + hw;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }

        {
            let mom = T::from_f64_lossy(self.momentum);
            let unbias = if count > 1 { m / (m - T::one()) } else { T::one() };
            let mut guard = self.running.lock().expect("running stats lock");
            let running = guard.get_or_insert_with(|| RunningStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            });
            for ch in 0..c {
                running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean[ch];
                running.var[ch] = (T::one() - mom) * running.var[ch] + mom * var[ch] * unbias;
            }
        }

        let xhat: Arc<[T]> = xhat.into();
        let (need_x, need_g, need_b) = (x.tracks_grad(), self.gamma.tracks_grad(), self.beta.tracks_grad());
        Ok(Tensor::from_op(
            out,
            x.shape().to_vec(),
            "norm2d",
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            move |g| {
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in at(b, ch)..at(b, ch) + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                // dx = γ/(σ·M) · (M·g − Σg − x̂·Σ(g·x̂))
                let gx = need_x.then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / m;
                            for i in at(b, ch)..at(b, ch) + hw {
                                dx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    dx
                });
                vec![gx, need_g.then_some(sum_gx), need_b.then_some(sum_g)]
            },
        ))
    }
}

impl<T: Scalar> Params<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        f(&format!("{prefix}.gamma"), &self.gamma, Decay::No);
        f(&format!("{prefix}.beta"), &self.beta, Decay::No);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma, Decay::No);
        f(&format!("{prefix}.beta"), &mut self.beta, Decay::No);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        f(prefix, self);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_many, randn, GradcheckConfig};
    use crate::rng::Rng;

    type T64 = Tensor<f64>;

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = Rng::new(1);
        let x = randn(&[4, 3, 5, 5], &mut rng)
            .scale(3.0)
            .unwrap()
            .add_scalar(2.0)
            .unwrap();
        let bn = BatchNorm2d::<f64>::new(3).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.mean(&[0, 2, 3]).unwrap();
        let var = y.square().unwrap().mean(&[0, 2, 3]).unwrap();
        for (m, v) in mean.data().iter().zip(var.data()) {
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn standard_input_is_nearly_unchanged() {
        // exactly zero-mean, unit-variance per channel
        let x = T64::from_vec(
            vec![1., -1., 1., -1., 2f64.sqrt(), -(2f64.sqrt()), 0., 0.],
            &[1, 2, 2, 2],
        )
        .unwrap();
        let y = BatchNorm2d::<f64>::new(2).unwrap().forward(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_before_train_is_an_error() {
        let bn = BatchNorm2d::<f64>::new(2).unwrap();
        let x = T64::ones(&[1, 2, 2, 2]).unwrap();
        assert!(bn.forward(&x, Mode::Eval).is_err());
        bn.forward(&x, Mode::Train).unwrap();
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let bn = BatchNorm2d::<f64>::new(1).unwrap();
        let x = T64::from_vec(vec![1., 3., 5., 7.], &[1, 1, 2, 2]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        let s = bn.running_stats().unwrap();
        assert!((s.mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance 20/3
        assert!((s.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let want = (1.0 - 0.4) / (s.var[0] + 1e-5f64).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let bn = BatchNorm2d::<f64>::new(3).unwrap();
        assert!(bn.forward(&T64::ones(&[1, 2, 2, 2]).unwrap(), Mode::Train).is_err());
    }

    #[test]
    fn gradcheck_train_mode() {
        let mut rng = Rng::new(2);
        let x = randn(&[2, 3, 2, 2], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let probe = randn(&[2, 3, 2, 2], &mut rng);
        let r = gradcheck_many(
            |t| {
                let mut bn = BatchNorm2d::<f64>::new(3)?;
                bn.gamma = t[1].clone();
                bn.beta = t[2].clone();
                Ok(bn.forward(&t[0], Mode::Train)?.mul(&probe)?.sum_all())
            },
            &[x, gamma, beta],
            &GradcheckConfig::with_tol(1e-4),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
