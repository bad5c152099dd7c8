//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: its shape and data never change after
//! construction. The only mutable state is the gradient buffer of leaf
//! tensors, which [`Tensor::backward`] accumulates into (`+=`), so a
//! parameter used in several places receives the sum of all contributions.
//!
//! Every operation that consumes at least one tensor with `requires_grad`
//! records a lineage node (operation tag, parents, and a closure mapping the
//! output gradient to parent gradients). Node ids are drawn from a global
//! monotonically increasing counter, so a parent always has a smaller id than
//! its children and sorting reachable nodes by descending id is a valid
//! reverse topological order.

mod elementwise;
mod linalg;
mod reduce;
mod shape_ops;
mod softmax;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use elementwise::Unary;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);
static CHECKED: AtomicBool = AtomicBool::new(false);

/// Enables or disables checked mode process-wide. In checked mode,
/// elementwise operations reject non-finite inputs.
pub fn set_checked(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn is_checked() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<[T]>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            s.field("data", &&self.node.data[..]);
        }
        if let Some(g) = &self.node.grad_fn {
            s.field("op", &g.op);
        }
        s.field("requires_grad", &self.node.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "extents must be positive and rank at least 1".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn new_node(data: Arc<[T]>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad_fn,
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape("from_vec", shape)?;
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("expected {} elements, got {}", numel_of(shape), data.len()),
            });
        }
        Ok(Self::new_node(data.into(), shape.to_vec(), false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::new_node(vec![value].into(), vec![1], false, None)
    }

    /// A fresh leaf sharing this tensor's data, with gradient tracking enabled.
    pub fn requires_grad(&self) -> Self {
        Self::new_node(self.node.data.clone(), self.node.shape.clone(), true, None)
    }

    /// A fresh leaf sharing this tensor's data, cut from any lineage.
    pub fn detach(&self) -> Self {
        Self::new_node(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    /// Records an operation result. Lineage is attached only when some parent
    /// tracks gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        Self::from_op_shared(data.into(), shape, op, parents, backward)
    }

    pub(crate) fn from_op_shared(
        data: Arc<[T]>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.node.requires_grad);
        let grad_fn = tracked.then(|| GradFn {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::new_node(data, shape, tracked, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn shared_data(&self) -> Arc<[T]> {
        self.node.data.clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape().to_vec(),
                reason: "expected exactly one element".into(),
            });
        }
        Ok(self.node.data[0])
    }

    pub fn tracks_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Same values in another scalar type; lineage is not carried over.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::new_node(data.into(), self.shape().to_vec(), false, None)
    }

    /// Reverse-mode sweep from a one-element tensor. Gradients of every
    /// reachable leaf that tracks gradients are accumulated into its buffer.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::Backward(
                "loss has no lineage to any tensor that requires grad".into(),
            ));
        }

        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            if let Some(gf) = &t.node.grad_fn {
                stack.extend(
                    gf.parents
                        .iter()
                        .filter(|p| p.node.requires_grad && !seen.contains(&p.node.id))
                        .cloned(),
                );
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.node.id));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in order {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad size", gf.op);
                        match pending.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(p.node.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parent gradient only when the parent participates in differentiation.
pub(crate) fn needs(t: &Tensor<impl Scalar>) -> bool {
    t.tracks_grad()
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    #[test]
    fn rejects_bad_construction() {
        assert!(T64::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(T64::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn backward_requires_scalar_and_lineage() {
        let x = T64::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Backward(_))));
        let c = T64::scalar(3.0);
        assert!(c.backward().is_err());
    }

    #[test]
    fn sum_of_square_gives_twice_theta() {
        let theta = T64::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap().requires_grad();
        theta.mul(&theta).unwrap().sum_all().backward().unwrap();
        assert_eq!(theta.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn grads_accumulate_across_calls_until_zeroed() {
        let theta = T64::from_vec(vec![1.0, 1.0], &[2]).unwrap().requires_grad();
        theta.sum_all().backward().unwrap();
        theta.sum_all().backward().unwrap();
        assert_eq!(theta.grad().unwrap(), vec![2.0, 2.0]);
        theta.zero_grad();
        assert!(theta.grad().is_none());
    }

    #[test]
    fn untracked_ops_record_no_lineage() {
        let a = T64::ones(&[2]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.tracks_grad());
    }

    #[test]
    fn diamond_graph_accumulates_both_branches() {
        // y = exp(x) + x*x, dy/dx = exp(x) + 2x
        let x = T64::from_vec(vec![0.3, -0.7], &[2]).unwrap().requires_grad();
        let y = x.exp().unwrap().add(&x.mul(&x).unwrap()).unwrap();
        y.sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip([0.3f64, -0.7]) {
            // central-difference oracle
            let f = |v: f64| v.exp() + v * v;
            let fd = (f(xi + 1e-6) - f(xi - 1e-6)) / 2e-6;
            assert!((gi - fd).abs() < 1e-8, "{gi} vs {fd}");
        }
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<S: Send + Sync>() {}
        assert_send_sync::<Tensor<f32>>();
    }
}
