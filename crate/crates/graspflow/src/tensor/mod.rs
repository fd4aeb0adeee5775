//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after construction; the only mutable slot is the
//! gradient accumulator. Operations that take part in differentiation record
//! their parents and a backward closure, forming an implicit DAG that
//! `backward` walks in reverse topological order. Data buffers are shared via
//! `Arc`, so `detach` and `reshape` are cheap.

mod gradcheck;
mod io;
pub mod ops;

pub use gradcheck::grad_check;
pub use io::{read_tensor, write_tensor};

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type BackFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) + Send + Sync>;

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

/// Shared handle to an immutable n-dimensional array, optionally part of a
/// differentiation graph.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor from raw data. Panics if the element count does not match
    /// the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        Tensor {
            inner: Arc::new(Inner {
                shape: shape.to_vec(),
                data: Arc::new(data),
                requires_grad: false,
                grad: Mutex::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf: gradients will be accumulated into it by `backward`.
    pub fn param(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        let t = Tensor::from_vec(shape, data);
        Tensor {
            inner: Arc::new(Inner {
                shape: t.inner.shape.clone(),
                data: Arc::clone(&t.inner.data),
                requires_grad: true,
                grad: Mutex::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    /// Interior node produced by an operation. Graph edges are only recorded
    /// when some parent takes part in differentiation; otherwise the result is
    /// a plain tensor and the inputs can be freed as usual.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackFn<T>,
    ) -> Tensor<T> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if requires_grad {
            Tensor {
                inner: Arc::new(Inner {
                    shape,
                    data: Arc::new(data),
                    requires_grad: true,
                    grad: Mutex::new(None),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::from_vec(&shape, data)
        }
    }

    /// Same data viewed with a new shape; no copy.
    pub(crate) fn view_as(&self, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: BackFn<T>) -> Tensor<T> {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if requires_grad {
            Tensor {
                inner: Arc::new(Inner {
                    shape,
                    data: Arc::clone(&self.inner.data),
                    requires_grad: true,
                    grad: Mutex::new(None),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor {
                inner: Arc::new(Inner {
                    shape,
                    data: Arc::clone(&self.inner.data),
                    requires_grad: false,
                    grad: Mutex::new(None),
                    parents: Vec::new(),
                    backward: None,
                }),
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Takes the gradient out, leaving the accumulator empty.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Leaf view of the same data outside any graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            inner: Arc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                grad: Mutex::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Fresh trainable leaf with copied data (used by the optimizer when it
    /// replaces a parameter).
    pub fn to_param(&self) -> Tensor<T> {
        Tensor::param(&self.inner.shape, self.inner.data.as_ref().clone())
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const u8 as usize
    }

    /// Accumulates into the gradient slot. The closure receives a zero
    /// initialized buffer on first use and must add its contribution.
    pub(crate) fn accum_grad_with(&self, f: impl FnOnce(&mut [T])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut guard = self.inner.grad.lock().unwrap();
        let slot = guard.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(slot);
    }

    pub(crate) fn accum_grad_slice(&self, delta: &[T]) {
        self.accum_grad_with(|slot| {
            for (s, d) in slot.iter_mut().zip(delta.iter()) {
                *s = *s + *d;
            }
        });
    }

    /// Reverse-mode sweep from a scalar. Populates the gradient of every
    /// tensor with `requires_grad` reachable from this one; contributions from
    /// multiple uses accumulate additively.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.inner.requires_grad {
            // Nothing upstream wants a gradient; a no-op keeps constant
            // functions well-defined for grad_check.
            return Ok(());
        }
        let order = self.topo_order();
        self.accum_grad_slice(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let grad = node
                    .inner
                    .grad
                    .lock()
                    .unwrap()
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.numel()]);
                back(&grad, &node.inner.parents);
            }
        }
        Ok(())
    }

    /// Post-order DFS over grad-requiring ancestors; iterative to keep deep
    /// graphs off the call stack.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.inner.parents;
            let mut pushed = false;
            let mut idx = child_idx;
            while idx < parents.len() {
                let p = &parents[idx];
                idx += 1;
                if p.inner.requires_grad && !visited.contains(&p.key()) {
                    visited.insert(p.key());
                    stack.push((node.clone(), idx));
                    stack.push((p.clone(), 0));
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                order.push(node);
            }
        }
        order
    }
}

/// Per-channel batch normalization state: learned affine plus running
/// statistics for inference.
pub struct BatchNormState<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Fresh state: scale 1, shift 0, running mean 0, running var 1.
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<BatchNormState<T>> {
        if channels == 0 {
            return Err(Error::Config("batch norm needs at least one channel".into()));
        }
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::Config(format!(
                "batch norm momentum must be in (0,1), got {momentum}"
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "batch norm epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(BatchNormState {
            scale: Tensor::param(&[channels], vec![T::one(); channels]),
            shift: Tensor::param(&[channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(momentum),
            epsilon: T::from_f64(epsilon),
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// Validates the shape and sign invariants; used after deserialization.
    pub fn check(&self) -> Result<()> {
        let c = self.channels();
        if self.shift.numel() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::dimension(
                "batchnorm",
                format!(
                    "per-channel vectors disagree: scale {}, shift {}, mean {}, var {}",
                    c,
                    self.shift.numel(),
                    self.running_mean.len(),
                    self.running_var.len()
                ),
            ));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::Config("running variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whether batch statistics are computed from the batch (training) or taken
/// from running estimates (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
