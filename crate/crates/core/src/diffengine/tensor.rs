//! Reverse-mode differentiable tensors.
//!
//! A [`Tensor`] is a shared handle to a graph node holding 64-bit values,
//! an optional same-shape gradient accumulator, and the closure that routes
//! gradients to its parents. Graphs are rebuilt every training step; leaf
//! tensors (parameters) outlive the graphs built over them.
//!
//! Any non-finite value produced by a forward op or a backward pass is an
//! immediate, located failure.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, TcsError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradients returned per parent; `None` when that parent needs no grad.
pub(crate) type ParentGrads = Vec<Option<ArrayD<f64>>>;

/// Backward closure: receives the node's own values and accumulated grad.
pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> Result<ParentGrads>>;

pub(crate) struct TensorInner {
    pub id: u64,
    pub values: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor>,
    pub backward_fn: Option<BackwardFn>,
    pub op_name: &'static str,
    /// Set for leaf parameters so optimizer failures can name them.
    pub param_name: Option<String>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("op", &inner.op_name)
            .field("shape", &inner.values.shape())
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

/// Locate the first non-finite entry, if any.
pub(crate) fn finite_or_err(context: &str, arr: &ArrayD<f64>) -> Result<()> {
    for (idx, v) in arr.indexed_iter() {
        if !v.is_finite() {
            use ndarray::Dimension;
            return Err(TcsError::NonFinite {
                context: context.to_string(),
                detail: format!(
                    "value {v} at index {:?} of shape {:?}",
                    idx.as_array_view().as_slice().unwrap_or(&[]),
                    arr.shape()
                ),
            });
        }
    }
    Ok(())
}

impl Tensor {
    fn from_inner(inner: TensorInner) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    /// A constant leaf; gradients do not flow into it.
    pub fn constant(values: ArrayD<f64>) -> Result<Self> {
        finite_or_err("constant", &values)?;
        Ok(Self::from_inner(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            values,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward_fn: None,
            op_name: "constant",
            param_name: None,
        }))
    }

    /// A trainable leaf with a zeroed gradient accumulator.
    pub fn parameter(values: ArrayD<f64>, name: impl Into<String>) -> Result<Self> {
        finite_or_err("parameter", &values)?;
        let grad = ArrayD::zeros(values.raw_dim());
        Ok(Self::from_inner(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            values,
            grad: Some(grad),
            requires_grad: true,
            parents: Vec::new(),
            backward_fn: None,
            op_name: "parameter",
            param_name: Some(name.into()),
        }))
    }

    /// A 0-dimensional constant.
    pub fn scalar(v: f64) -> Result<Self> {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| TcsError::ShapeMismatch(format!("from_vec: {e}")))?;
        Self::constant(arr)
    }

    pub(crate) fn from_op(
        values: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
        op_name: &'static str,
    ) -> Result<Self> {
        finite_or_err(op_name, &values)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Self::from_inner(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            values,
            grad: None,
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward_fn: if requires_grad { Some(backward_fn) } else { None },
            op_name,
            param_name: None,
        }))
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().values.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.borrow().values.ndim() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn values(&self) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.inner.borrow(), |i| &i.values)
    }

    /// Extract the single value of a 0-d tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.values.ndim() != 0 {
            return Err(TcsError::ShapeMismatch(format!(
                "item() requires a 0-d tensor, got shape {:?}",
                inner.values.shape()
            )));
        }
        Ok(inner.values[IxDyn(&[])])
    }

    /// Copy of the gradient accumulator, when one exists.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn param_name(&self) -> Option<String> {
        self.inner.borrow().param_name.clone()
    }

    /// Overwrite the values in place (optimizer updates). Shape-preserving.
    pub fn set_values(&self, values: ArrayD<f64>) -> Result<()> {
        finite_or_err("set_values", &values)?;
        let mut inner = self.inner.borrow_mut();
        if values.shape() != inner.values.shape() {
            return Err(TcsError::ShapeMismatch(format!(
                "set_values: {:?} vs {:?}",
                values.shape(),
                inner.values.shape()
            )));
        }
        inner.values = values;
        Ok(())
    }

    /// Reset the gradient accumulator to zero (leaves with requires_grad).
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.fill(0.0);
        } else if inner.requires_grad {
            inner.grad = Some(ArrayD::zeros(inner.values.raw_dim()));
        }
    }

    /// Two handles referencing the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Fill the grad accumulators of every reachable node that requires grad
/// with d(loss)/d(node). `loss` must be a finite 0-d tensor. Repeated calls
/// accumulate into leaf grads unless they are cleared in between.
pub fn backward(loss: &Tensor) -> Result<()> {
    {
        let inner = loss.inner.borrow();
        if inner.values.ndim() != 0 {
            return Err(TcsError::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.values.shape()
            )));
        }
        let v = inner.values[IxDyn(&[])];
        if !v.is_finite() {
            return Err(TcsError::NonFinite {
                context: "backward(loss)".into(),
                detail: format!("loss value {v}"),
            });
        }
    }
    if !loss.requires_grad() {
        return Ok(()); // nothing reachable wants a gradient
    }

    // Iterative post-order DFS; reverse gives a valid topological order.
    let order = topo_order(loss);

    // Interior grads belong to one pass; only leaf accumulators persist
    // across repeated backward calls.
    for node in &order {
        let mut inner = node.inner.borrow_mut();
        if inner.backward_fn.is_some() {
            inner.grad = None;
        }
    }

    // Seed d(loss)/d(loss) = 1.
    {
        let mut inner = loss.inner.borrow_mut();
        let seed = ArrayD::from_elem(IxDyn(&[]), 1.0);
        match inner.grad.as_mut() {
            Some(g) => *g += &seed,
            None => inner.grad = Some(seed),
        }
    }

    for node in order.iter().rev() {
        let (grads, parents) = {
            let inner = node.inner.borrow();
            let Some(backward_fn) = inner.backward_fn.as_ref() else {
                continue; // leaf
            };
            let grad = inner
                .grad
                .as_ref()
                .expect("topo-ordered node missing grad during backward");
            let grads = backward_fn(&inner.values, grad)?;
            (grads, inner.parents.clone())
        };
        debug_assert_eq!(grads.len(), parents.len());
        for (parent, grad) in parents.iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let mut inner = parent.inner.borrow_mut();
            if !inner.requires_grad {
                continue;
            }
            finite_or_err(node.inner.borrow().op_name, &grad)?;
            debug_assert_eq!(grad.shape(), inner.values.shape());
            match inner.grad.as_mut() {
                Some(g) => *g += &grad,
                None => inner.grad = Some(grad),
            }
        }
    }
    Ok(())
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, child_cursor) explicit stack to avoid recursion on deep graphs
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, cursor)) = stack.pop() {
        let next = {
            let inner = node.inner.borrow();
            inner.parents.get(cursor).cloned()
        };
        match next {
            Some(parent) => {
                stack.push((node, cursor + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            }
            None => order.push(node),
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn constant_rejects_nonfinite() {
        let mut arr = ArrayD::zeros(IxDyn(&[2, 2]));
        arr[IxDyn(&[1, 0])] = f64::INFINITY;
        let err = Tensor::constant(arr).unwrap_err().to_string();
        assert!(err.contains("[1, 0]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = Tensor::parameter(ArrayD::zeros(IxDyn(&[3])), "p").unwrap();
        assert!(backward(&p).is_err());
    }

    #[test]
    fn leaf_identity_and_grad_storage() {
        let p = Tensor::parameter(ArrayD::zeros(IxDyn(&[2])), "p").unwrap();
        let q = p.clone();
        assert!(p.same_storage(&q));
        assert_eq!(p.grad().unwrap().shape(), &[2]);
    }
}
