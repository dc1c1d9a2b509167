use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use super::backward::Op;
use super::error::{NumericsError, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Ops executed inside never retain their inputs, so parameter tensors can be
/// used for cheap inference.
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

pub(crate) struct Node<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RwLock<Vec<S>>,
    pub(crate) grad: Mutex<Option<Vec<S>>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<S>>,
}

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// Cloning is cheap and shares storage. Leaves created with
/// [`Tensor::param`] accumulate gradients across [`Tensor::backward`] calls
/// until [`Tensor::zero_grad`].
#[derive(Clone)]
pub struct Tensor<S: Scalar = f64> {
    pub(crate) node: Arc<Node<S>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn build(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(NumericsError::shape(
                "from_vec",
                format!("shape {:?} holds {} values, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "from_vec" });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.shape().to_vec(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![S::zero(); numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: S) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    /// Output of a differentiable op. Records `op` only when some parent
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        op: impl FnOnce() -> Op<S>,
        parents: &[&Tensor<S>],
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: name });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Ok(Self::build(shape, data, true, Some(op())))
        } else {
            Ok(Self::build(shape, data, false, None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<S>> {
        self.node.data.read().expect("tensor data lock")
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(NumericsError::Usage(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// In-place update of a leaf's values (optimizer steps, weight loading).
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) -> Result<()> {
        if !self.is_leaf() {
            return Err(NumericsError::Usage("update_data on a non-leaf tensor".into()));
        }
        let mut guard = self.node.data.write().expect("tensor data lock");
        f(&mut guard);
        if guard.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "update_data" });
        }
        Ok(())
    }

    /// Same values, cut from any graph.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Accumulates d(self)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.node.id, vec![S::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            match &t.node.op {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in op.backward(t, &g)? {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(parent.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-tracking nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in op.parents().into_iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<_> = data.iter().take(6).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("head", &head)
            .finish()
    }
}
