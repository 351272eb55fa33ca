//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a node holding the parents and a
//! backward rule; [`Tensor::backward`] walks that DAG once in reverse
//! topological order and accumulates `d(loss)/d(leaf)` into every tracked
//! leaf. Gradients add up across calls until [`Tensor::zero_grad`].

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod nn;
pub mod optim;

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Error, Result};
use crate::rng::RngStream;
use crate::Scalar;

pub use conv::{channel_map_1x1, conv2d, conv_output_size};
pub use nn::{batch_norm, dropout, BatchNormStats};

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>> + Send + Sync>;

struct Node<S: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<S>>>,
    node: Option<Node<S>>,
}

/// N-dimensional row-major array with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.node.as_ref().map(|n| n.op).unwrap_or("leaf");
        write!(
            f,
            "Tensor(shape={:?}, op={}, requires_grad={})",
            self.inner.shape, op, self.inner.requires_grad
        )
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return dim_err(format!(
            "shape {shape:?} must be non-empty with all dims >= 1"
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return dim_err(format!(
            "shape {shape:?} holds {n} elements, data has {len}"
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    /// Untracked constant tensor.
    pub fn new(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(vec![S::zero(); n], shape).expect("valid shape")
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::new(vec![v; n], shape).expect("valid shape")
    }

    pub fn scalar(v: S) -> Self {
        Self::full(&[1], v)
    }

    /// Draws `ε ~ N(0, 1)` of the given shape.
    pub fn gaussian_sample(shape: &[usize], rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal::<S>()).collect();
        Self::new(data, shape).expect("valid shape")
    }

    /// Uniform draw on `[-a, a)`.
    pub fn uniform(shape: &[usize], a: S, rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-a, a)).collect();
        Self::new(data, shape).expect("valid shape")
    }

    fn raw(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        requires_grad: bool,
        node: Option<Node<S>>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Builds the result of an operation, recording a tape node when any
    /// input is tracked and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        inputs: &[&Tensor<S>],
        backward: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + Send + Sync + 'static,
    ) -> Self {
        Self::from_op_shared(op, shape, Arc::new(data), inputs, backward)
    }

    pub(crate) fn from_op_shared(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        inputs: &[&Tensor<S>],
        backward: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = tracked.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::raw(shape, data, tracked, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.inner.data)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same values, no history, no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::raw(self.inner.shape.clone(), self.data_arc(), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn detach_param(&self) -> Self {
        Self::raw(self.inner.shape.clone(), self.data_arc(), true, None)
    }

    /// Mutable access to a leaf's values, used by optimizers.
    ///
    /// Copy-on-write: graphs still holding this tensor keep the old values.
    /// The accumulated gradient is preserved.
    pub fn data_mut(&mut self) -> &mut Vec<S> {
        if Arc::get_mut(&mut self.inner).is_none() {
            let grad = self.grad();
            self.inner = Arc::new(Inner {
                shape: self.inner.shape.clone(),
                data: self.data_arc(),
                requires_grad: self.inner.requires_grad,
                grad: Mutex::new(grad),
                node: None,
            });
        }
        let inner = Arc::get_mut(&mut self.inner).expect("unique after copy");
        Arc::make_mut(&mut inner.data)
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode differentiation from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that does not depend on any tracked leaf".into(),
            ));
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for inp in &node.inputs {
                    if inp.requires_grad() && !seen.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut grads: std::collections::HashMap<usize, Vec<S>> = std::collections::HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let input_grads = (node.backward)(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "op {}", node.op);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clears the accumulated gradients of every tensor in `params`.
pub fn zero_grads<'a, S: Scalar>(params: impl IntoIterator<Item = &'a Tensor<S>>) {
    for p in params {
        p.zero_grad();
    }
}
