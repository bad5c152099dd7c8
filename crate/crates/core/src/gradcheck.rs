//! Central finite-difference gradient checking (64-bit).
//!
//! The per-coordinate error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps coordinates whose true gradient is ~0 from turning
//! round-off into huge relative errors.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-5,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let y = f(inputs)?;
    if y.numel() != 1 {
        return Err(Error::Gradcheck(format!(
            "function must be scalar-valued, got shape {:?}",
            y.shape()
        )));
    }
    y.item()
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad()).collect();
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::Gradcheck(format!(
            "function must be scalar-valued, got shape {:?}",
            y.shape()
        )));
    }
    let plain: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
    let again = eval_scalar(&f, &plain)?;
    if y.item()?.to_bits() != again.to_bits() {
        return Err(Error::Gradcheck(format!(
            "function is non-deterministic: {} then {}",
            y.item()?,
            again
        )));
    }
    y.backward()?;

    let mut rng = Rng::new(cfg.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
        tol: cfg.tol,
    };
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut coords: Vec<usize> = (0..leaf.numel()).collect();
        if let Some(limit) = cfg.max_coords {
            if limit < coords.len() {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for &i in &coords {
            let mut probe = plain.clone();
            let mut shifted = |delta: f64| -> Result<f64> {
                let mut data = inputs[which].to_vec();
                data[i] += delta;
                probe[which] = Tensor::from_vec(data, inputs[which].shape())?;
                eval_scalar(&f, &probe)
            };
            let numeric = (shifted(cfg.eps)? - shifted(-cfg.eps)?) / (2.0 * cfg.eps);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            if !rel.is_finite() {
                return Err(Error::Gradcheck(format!(
                    "non-finite comparison at input {which} coordinate {i}"
                )));
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, i);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Single-input convenience form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    gradcheck_many(|xs| f(&xs[0]), std::slice::from_ref(x), cfg)
}

/// Random tensor with entries drawn from `N(0, 1)`.
pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    Tensor::from_vec(data, shape).expect("shape is consistent")
}
