use super::{is_checked, needs, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the smaller operand of a binary op maps onto the output.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// One element repeated everywhere.
    Scalar,
    /// Operand shape is a suffix of the output shape; repeats over leading axes.
    Suffix(usize),
    /// Per-channel vector against `N×C×H×W`.
    Channel {
        channels: usize,
        inner: usize,
    },
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::Channel { channels, inner } => (i / inner) % channels,
        }
    }

    /// Plan for broadcasting `small` against `big`, if permitted.
    fn plan(big: &[usize], small: &[usize]) -> Option<Bcast> {
        if big == small {
            return Some(Bcast::Same);
        }
        if small.iter().product::<usize>() == 1 {
            return Some(Bcast::Scalar);
        }
        if big.len() == 4 {
            let c = big[1];
            if small == [c] || small == [1, c, 1, 1] {
                return Some(Bcast::Channel {
                    channels: c,
                    inner: big[2] * big[3],
                });
            }
        }
        if small.len() < big.len() && big.ends_with(small) {
            return Some(Bcast::Suffix(small.iter().product()));
        }
        None
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    #[inline]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

/// Elementwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Relu,
    Sigmoid,
    Exp,
    /// Natural log; callers clamp inputs away from zero first.
    Log,
    Neg,
    Scale(T),
    AddScalar(T),
    Clamp(T, T),
    Square,
}

impl<T: Scalar> Unary<T> {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Clamp(..) => "clamp",
            Unary::Square => "square",
        }
    }

    #[inline]
    fn apply(self, x: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Scale(k) => x * k,
            Unary::AddScalar(k) => x + k,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
            Unary::Square => x * x,
        }
    }

    /// `dy/dx` given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Neg => -T::one(),
            Unary::Scale(k) => k,
            Unary::AddScalar(_) => T::one(),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
        }
    }
}

fn check_inputs<T: Scalar>(op: &str, inputs: &[&Tensor<T>]) -> Result<()> {
    if is_checked() {
        for t in inputs {
            t.check_finite(&format!("input to {op}"))?;
        }
    }
    Ok(())
}

/// Sum a full-size gradient down onto a broadcast operand.
fn reduce_to<T: Scalar>(full: Vec<T>, plan: Bcast, len: usize) -> Vec<T> {
    if plan == Bcast::Same {
        return full;
    }
    let mut out = vec![T::zero(); len];
    for (i, g) in full.into_iter().enumerate() {
        out[plan.index(i)] += g;
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        check_inputs(op.name(), &[self, other])?;
        let mismatch = || Error::ShapeMismatch {
            op: op.name(),
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        // Output takes the larger operand's shape.
        let (shape, pa, pb) = if let Some(pb) = Bcast::plan(self.shape(), other.shape()) {
            (self.shape().to_vec(), Bcast::Same, pb)
        } else if let Some(pa) = Bcast::plan(other.shape(), self.shape()) {
            (other.shape().to_vec(), pa, Bcast::Same)
        } else {
            return Err(mismatch());
        };

        let a = self.shared_data();
        let b = other.shared_data();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|i| op.apply(a[pa.index(i)], b[pb.index(i)])).collect();

        let (need_a, need_b) = (needs(self), needs(other));
        Ok(Tensor::from_op(
            data,
            shape,
            op.name(),
            vec![self.clone(), other.clone()],
            move |g| {
                let mut ga = need_a.then(|| Vec::with_capacity(g.len()));
                let mut gb = need_b.then(|| Vec::with_capacity(g.len()));
                for (i, &gi) in g.iter().enumerate() {
                    let (da, db) = op.partials(a[pa.index(i)], b[pb.index(i)]);
                    if let Some(v) = ga.as_mut() {
                        v.push(gi * da);
                    }
                    if let Some(v) = gb.as_mut() {
                        v.push(gi * db);
                    }
                }
                vec![
                    ga.map(|v| reduce_to(v, pa, a.len())),
                    gb.map(|v| reduce_to(v, pb, b.len())),
                ]
            },
        ))
    }

    /// Elementwise sum. Shapes must match, or one side must be a single
    /// element, a trailing-suffix shape, or a per-channel vector against
    /// `N×C×H×W`.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Div)
    }

    pub fn unary(&self, op: Unary<T>) -> Result<Tensor<T>> {
        check_inputs(op.name(), &[self])?;
        let x = self.shared_data();
        let y: Vec<T> = x.iter().map(|&v| op.apply(v)).collect();
        let y_saved: std::sync::Arc<[T]> = y.clone().into();
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            op.name(),
            vec![self.clone()],
            move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y_saved.iter()))
                        .map(|(&gi, (&xi, &yi))| gi * op.derivative(xi, yi))
                        .collect(),
                )]
            },
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Log)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, k: T) -> Result<Tensor<T>> {
        self.unary(Unary::Scale(k))
    }

    pub fn add_scalar(&self, k: T) -> Result<Tensor<T>> {
        self.unary(Unary::AddScalar(k))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Tensor<T>> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary(Unary::Square)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Tensor<T>> {
        self.neg()?.add_scalar(T::one())
    }
}
