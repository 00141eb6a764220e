//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations that
//! involve at least one tensor requiring gradients record a backward closure;
//! [`Tensor::backward`] walks the recorded graph from a scalar root and
//! returns a [`Gradients`] table keyed by leaf tensor and by parameter.
//!
//! Layout is row-major. Feature maps are `C x H x W` (one image at a time).

mod ops;
mod spatial;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use spatial::Conv2dArgs;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Identifier of a trainable parameter; gradients for every leaf created from
/// the same parameter are summed under this id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) u64);

impl ParamId {
    pub(crate) fn fresh() -> Self {
        ParamId(next_id())
    }
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Op {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false, None))
    }

    /// A leaf that records gradients, used as an input for gradient checks.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::leaf(t.0.data.clone(), shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(0.0, shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(1.0, shape)
    }

    pub fn full(value: f64, shape: &[usize]) -> Self {
        Self::leaf(
            Arc::new(vec![value; numel(shape)]),
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(value, &[1])
    }

    pub(crate) fn leaf(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            data,
            shape,
            requires_grad: requires_grad && grad_enabled(),
            param,
            op: None,
        }))
    }

    /// Builds the result of an operation. The backward closure receives the
    /// output gradient and returns one optional gradient per input.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| Op {
            inputs,
            backward: Box::new(backward),
        });
        Tensor(Arc::new(Node {
            id: next_id(),
            data: Arc::new(data),
            shape,
            requires_grad,
            param: None,
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape() {
            [a, b] => Ok((a, b)),
            ref s => Err(Error::shape("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::shape("dims3", format!("expected rank 3, got {s:?}"))),
        }
    }

    /// Same values, no history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse pass from a single-element tensor.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape()),
            ));
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut grads = Gradients::default();

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                Some(op) => {
                    let input_grads = (op.backward)(&grad);
                    debug_assert_eq!(input_grads.len(), op.inputs.len());
                    for (input, g) in op.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel());
                        accumulate(pending.entry(input.id()).or_default(), &g);
                    }
                }
                None => {
                    if let Some(pid) = node.0.param {
                        accumulate(grads.by_param.entry(pid).or_default(), &grad);
                    }
                    grads.by_leaf.insert(node.id(), grad);
                }
            }
        }
        Ok(grads)
    }

    fn topo_order(&self) -> Vec<Tensor> {
        // Iterative post-order DFS; graphs through deep backbones overflow
        // the stack with recursion.
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            let inputs = node.0.op.as_ref().map(|op| &op.inputs);
            match inputs.and_then(|ins| ins.get(child)) {
                Some(next) => {
                    let next = next.clone();
                    stack.push((node, child + 1));
                    if next.requires_grad() && visited.insert(next.id()) {
                        stack.push((next, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

fn accumulate(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Default, Debug)]
pub struct Gradients {
    by_leaf: HashMap<u64, Vec<f64>>,
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a leaf tensor that took part in the graph.
    pub fn get(&self, leaf: &Tensor) -> Option<&[f64]> {
        self.by_leaf.get(&leaf.id()).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::variable(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let y = {
            let _g = no_grad();
            x.exp().unwrap()
        };
        assert!(!y.requires_grad());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.exp().unwrap().backward().is_err());
    }
}
