//! Dense N-d tensor with tape-based reverse-mode differentiation.
//!
//! Design notes:
//! - A [`Tensor`] is a cheap handle (`Rc`) onto an immutable value plus an
//!   optional record of the operation that produced it. Backward walks the
//!   implicit tape in reverse topological order and accumulates vector-Jacobian
//!   products into `grad` slots.
//! - Values are immutable once created; only leaf tensors may be rewritten
//!   (by the optimizer) through [`Tensor::set_data`], which swaps the backing
//!   buffer so closures holding the old snapshot stay consistent.
//! - Every op validates that its output is finite and errors out otherwise.
//! - Graphs are single-threaded by construction (`Rc`); independent graphs can
//!   live on independent threads.

mod gradcheck;
mod init;
mod ops;
mod params;
mod scalar;

pub use gradcheck::{clear_vjp_fault, finite_difference_check, inject_vjp_fault};
pub use init::{kaiming_conv, trunc_normal, Init};
pub use params::ParamStore;
pub use scalar::Scalar;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Vector-Jacobian product: maps the output gradient to one optional gradient
/// per parent (None for inputs that do not need one).
type Vjp<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct OpRecord<S: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<S>>,
    vjp: Vjp<S>,
}

struct TensorInner<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Rc<Vec<S>>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Option<OpRecord<S>>,
}

/// Dense row-major tensor. Clone is shallow: both handles see the same value
/// and gradient slot.
pub struct Tensor<S: Scalar> {
    inner: Rc<TensorInner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op.as_ref().map(|o| o.name))
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Runs `f` without recording backward rules. Useful for inference and for
/// freezing submodules during training.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Constant leaf tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::new_leaf(shape, data, false)
    }

    /// Trainable leaf tensor: participates in backward and owns a grad slot.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::new_leaf(shape, data, true)
    }

    fn new_leaf(shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data: RefCell::new(Rc::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![S::ZERO; numel(shape)]).expect("zeros: size cannot mismatch")
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        Self::from_vec(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: S) -> Result<Self> {
        Self::from_vec(&[1], vec![v])
    }

    /// Records a new op node. `vjp` receives the output gradient and returns
    /// one optional gradient per parent, in order. Recording is skipped when
    /// gradients are disabled or no parent needs them.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        vjp: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: op output size mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let record = if grad_enabled() && parents.iter().any(|p| p.needs_grad()) {
            Some(OpRecord { name, parents, vjp: Box::new(vjp) })
        } else {
            None
        };
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(Rc::new(data)),
                grad: RefCell::new(None),
                requires_grad: false,
                op: record,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of the value (refcount bump, no copy).
    pub fn data(&self) -> Rc<Vec<S>> {
        self.inner.data.borrow().clone()
    }

    /// Copies the value out as a plain vector.
    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.len() != 1 {
            return Err(Error::invalid("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True if backward should reach this tensor (trainable leaf or computed
    /// from one).
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replaces a leaf's value. Existing graph nodes keep the snapshot they
    /// captured at forward time.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if self.inner.op.is_some() {
            return Err(Error::invalid("set_data", "only leaf tensors can be rewritten"));
        }
        if data.len() != self.len() {
            return Err(Error::shape("set_data", format!("expected {} elements, got {}", self.len(), data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "set_data" });
        }
        *self.inner.data.borrow_mut() = Rc::new(data);
        Ok(())
    }

    /// Leaf copy of this tensor's value, detached from the graph.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            inner: Rc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.data()),
                grad: RefCell::new(None),
                requires_grad: false,
                op: None,
            }),
        }
    }

    /// Same value reinterpreted as a trainable leaf (fresh grad slot).
    pub fn detach_as_param(&self) -> Tensor<S> {
        Tensor {
            inner: Rc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.data()),
                grad: RefCell::new(None),
                requires_grad: true,
                op: None,
            }),
        }
    }

    /// Identity check: do two handles refer to the same node?
    pub fn same_node(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = a.add(v);
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar output. Leaf gradients accumulate
    /// additively; calling backward twice doubles them. Interior gradients
    /// are sweep-local and discarded.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("expected a scalar output, got shape {:?}", self.shape()),
            ));
        }
        self.backward_with(&[S::ONE])
    }

    /// Reverse-mode sweep with an explicit seed gradient.
    pub fn backward_with(&self, seed: &[S]) -> Result<()> {
        if seed.len() != self.len() {
            return Err(Error::shape("backward", "seed gradient size mismatch"));
        }
        // Iterative post-order DFS gives a topological order of the subgraph.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<*const TensorInner<S>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, child_idx)) = stack.pop() {
            let parents: Option<&OpRecord<S>> = node.inner.op.as_ref();
            let n_parents = parents.map_or(0, |r| r.parents.len());
            if child_idx < n_parents {
                let parent = node.inner.op.as_ref().unwrap().parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.needs_grad() && visited.insert(Rc::as_ptr(&parent.inner)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Transient per-sweep gradients, keyed by node identity.
        let mut sweep: HashMap<*const TensorInner<S>, Vec<S>> = HashMap::new();
        sweep.insert(Rc::as_ptr(&self.inner), seed.to_vec());
        if self.inner.requires_grad {
            self.accumulate_grad(seed);
        }
        for node in order.iter().rev() {
            let Some(record) = node.inner.op.as_ref() else { continue };
            let Some(out_grad) = sweep.remove(&Rc::as_ptr(&node.inner)) else {
                // Visited but received no contribution.
                continue;
            };
            let parent_grads = (record.vjp)(&out_grad);
            debug_assert_eq!(parent_grads.len(), record.parents.len(), "{}: vjp arity", record.name);
            for (parent, grad) in record.parents.iter().zip(parent_grads) {
                let Some(g) = grad else { continue };
                if !parent.needs_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.len(), "{}: vjp grad size", record.name);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: record.name });
                }
                if parent.inner.requires_grad {
                    parent.accumulate_grad(&g);
                } else {
                    match sweep.entry(Rc::as_ptr(&parent.inner)) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, &v) in e.get_mut().iter_mut().zip(&g) {
                                *a = a.add(v);
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_validation() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2], vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // d/dx sum(x*x) = 2x
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_grad() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap().sum().unwrap());
        assert!(y.backward().is_ok());
        assert!(x.grad().is_none());
    }

    #[test]
    fn set_data_rejects_interior_nodes() {
        let x = Tensor::param(&[1], vec![1.0f64]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(y.set_data(vec![3.0]).is_err());
        assert!(x.set_data(vec![3.0]).is_ok());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::param(&[1], vec![3.0f64]).unwrap();
        let y = x.mul(&x).unwrap().detach();
        let z = y.mul(&y).unwrap().sum().unwrap();
        z.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
