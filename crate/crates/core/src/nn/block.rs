use super::{BatchNorm2d, Conv2d, Decay, Mode, Params};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[conv3×3 → norm → relu] × 2` with "same" padding. Convolutions carry a
/// bias only when no normalization follows them.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub norm1: Option<BatchNorm2d<T>>,
    pub conv2: Conv2d<T>,
    pub norm2: Option<BatchNorm2d<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, use_norm: bool, rng: &mut Rng) -> Result<Self> {
        let conv1 = Conv2d::same(in_channels, out_channels, 3, !use_norm, rng)?;
        let conv2 = Conv2d::same(out_channels, out_channels, 3, !use_norm, rng)?;
        let norm =
            || -> Result<Option<BatchNorm2d<T>>> { use_norm.then(|| BatchNorm2d::new(out_channels)).transpose() };
        Ok(Self {
            conv1,
            norm1: norm()?,
            conv2,
            norm2: norm()?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = self.conv1.forward(x)?;
        if let Some(n) = &self.norm1 {
            h = n.forward(&h, mode)?;
        }
        h = self.conv2.forward(&h.relu()?)?;
        if let Some(n) = &self.norm2 {
            h = n.forward(&h, mode)?;
        }
        h.relu()
    }
}

impl<T: Scalar> Params<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Decay)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Decay)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm2d<T>)) {
        self.norm1.visit_norms(&format!("{prefix}.norm1"), f);
        self.norm2.visit_norms(&format!("{prefix}.norm2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_many, randn, GradcheckConfig};

    #[test]
    fn shape_arithmetic() {
        let mut rng = Rng::new(0);
        let block = ConvBlock::<f32>::new(1, 16, true, &mut rng).unwrap();
        let x = Tensor::<f32>::ones(&[1, 1, 8, 8]).unwrap();
        assert_eq!(block.forward(&x, Mode::Train).unwrap().shape(), [1, 16, 8, 8]);
    }

    #[test]
    fn deterministic_under_seed() {
        let x = randn(&[2, 2, 6, 6], &mut Rng::new(5));
        let run = || {
            let b = ConvBlock::<f64>::new(2, 4, true, &mut Rng::new(9)).unwrap();
            b.forward(&x, Mode::Train).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bias_only_without_norm() {
        let mut rng = Rng::new(0);
        let with = ConvBlock::<f32>::new(2, 4, true, &mut rng).unwrap();
        let without = ConvBlock::<f32>::new(2, 4, false, &mut rng).unwrap();
        assert!(with.conv1.bias.is_none() && with.norm1.is_some());
        assert!(without.conv1.bias.is_some() && without.norm1.is_none());
    }

    #[test]
    fn gradcheck_end_to_end() {
        let mut rng = Rng::new(1);
        let block = ConvBlock::<f64>::new(2, 3, true, &mut rng).unwrap();
        let x = randn(&[2, 2, 4, 4], &mut rng);
        let probe = randn(&[2, 3, 4, 4], &mut rng);
        let inputs = vec![x, block.conv1.weight.detach(), block.conv2.weight.detach()];
        let cfg = GradcheckConfig {
            eps: 1e-6,
            ..GradcheckConfig::with_tol(1e-4)
        };
        let r = gradcheck_many(
            |t| {
                let mut b = block.clone();
                b.conv1.weight = t[1].clone();
                b.conv2.weight = t[2].clone();
                Ok(b.forward(&t[0], Mode::Train)?.mul(&probe)?.sum_all())
            },
            &inputs,
            &cfg,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
