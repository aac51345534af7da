//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap, reference-counted handle. Tensors produced from
//! tracked inputs record the producing operation, so calling [`backward`] on
//! a scalar result walks the recorded graph once and returns the gradient of
//! every named leaf. Graphs are single-use: a second `backward` through the
//! same interior nodes fails with [`TensorError::GraphConsumed`].

mod catalog;
mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

pub use catalog::{finite_diff_check, forward_op, gradient_check, AttrValue, Attrs, OpKind};
pub use ops::index;
pub(crate) use ops::Op;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op}: missing or invalid attribute `{attr}`")]
    Attr { op: &'static str, attr: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not graph-tracked")]
    NotTracked,
    #[error("differentiation graph was already consumed by a previous backward pass")]
    GraphConsumed,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Leaf {
    name: Option<String>,
    requires_grad: bool,
}

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
    leaf: Leaf,
    consumed: Cell<bool>,
}

impl Drop for Inner {
    // Long chains would otherwise drop recursively and can overflow the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.node.take() {
            Some(node) => node.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.0) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}

/// Handle to an immutable n-dimensional array of `f64` in row-major order.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if let Some(name) = &self.0.leaf.name {
            d.field("name", name);
        }
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        d.field("tracked", &self.requires_grad()).finish()
    }
}

fn check_shape(shape: &[usize], len: usize) {
    assert!(
        !shape.is_empty() && shape.iter().all(|&d| d > 0),
        "tensor dimensions must be positive, got {shape:?}"
    );
    assert_eq!(
        shape.iter().product::<usize>(),
        len,
        "shape {shape:?} does not match data length {len}"
    );
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, node: Option<Node>, leaf: Leaf) -> Self {
        check_shape(&shape, data.len());
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            node,
            leaf,
            consumed: Cell::new(false),
        }))
    }

    /// Untracked constant.
    ///
    /// Panics if `shape` has a zero dimension or does not match `data.len()`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Self::build(
            shape.into(),
            data,
            None,
            Leaf {
                name: None,
                requires_grad: false,
            },
        )
    }

    /// Anonymous tracked leaf.
    pub fn variable(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Self::build(
            shape.into(),
            data,
            None,
            Leaf {
                name: None,
                requires_grad: true,
            },
        )
    }

    /// Named tracked leaf; its gradient is reported under `name` by [`backward`].
    pub fn param(name: impl Into<String>, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Self::build(
            shape.into(),
            data,
            None,
            Leaf {
                name: Some(name.into()),
                requires_grad: true,
            },
        )
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Self {
        let tracked = inputs.iter().any(Tensor::requires_grad);
        let node = tracked.then_some(Node { op, inputs });
        Self::build(
            shape,
            data,
            node,
            Leaf {
                name: None,
                requires_grad: false,
            },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn name(&self) -> Option<&str> {
        self.0.leaf.name.as_deref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.node.is_some() || self.0.leaf.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Gradient accumulated into this leaf by the last backward pass.
    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::new(self.0.shape.clone(), g.clone()))
    }

    /// Copy of the values without any graph attachment.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.shape.clone(), self.0.data.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }
}

/// Gradients of named leaves, keyed by parameter path.
#[derive(Debug, Clone, Default)]
pub struct GradMap(BTreeMap<String, Tensor>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    fn accumulate(&mut self, name: &str, shape: &[usize], g: &[f64]) {
        match self.0.get_mut(name) {
            Some(existing) => {
                let sum: Vec<f64> = existing.data().iter().zip(g).map(|(a, b)| a + b).collect();
                *existing = Tensor::new(shape.to_vec(), sum);
            }
            None => {
                self.0
                    .insert(name.to_owned(), Tensor::new(shape.to_vec(), g.to_vec()));
            }
        }
    }
}

/// Reverse-mode sweep from a scalar root.
///
/// Every tracked leaf reachable from `root` has its gradient stored (see
/// [`Tensor::grad`]); named leaves are also returned in the map. Leaves not
/// reachable from the root are absent, which callers treat as zero.
pub fn backward(root: &Tensor) -> Result<GradMap> {
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
    }
    if !root.requires_grad() {
        return Err(TensorError::NotTracked);
    }
    if root.0.consumed.get() {
        return Err(TensorError::GraphConsumed);
    }

    // Iterative post-order DFS over tracked tensors.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<*const Inner, ()> = HashMap::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.key(), ());
    while let Some((t, child)) = stack.pop() {
        let inputs = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((t, child + 1));
            if next.requires_grad() && visited.insert(next.key(), ()).is_none() {
                if next.0.consumed.get() {
                    return Err(TensorError::GraphConsumed);
                }
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }

    let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::new();
    grads.insert(root.key(), vec![1.0]);
    let mut out = GradMap::new();
    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.key()) else {
            continue;
        };
        match t.node() {
            Some(node) => {
                let input_grads = node.op.backward(&node.inputs, t, &g);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel());
                    match grads.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(input.key(), ig);
                        }
                    }
                }
                t.0.consumed.set(true);
            }
            None => {
                {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g.clone()),
                    }
                }
                if let Some(name) = t.name() {
                    out.accumulate(name, t.shape(), &g);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param("x", [3], vec![1.0, 2.0, 3.0]);
        let y = x.mul(&x).unwrap().sum();
        let g = backward(&y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let x = Tensor::param("x", [4], vec![0.5, -1.0, 2.0, 3.0]);
        let loss = x.mse(&x).unwrap();
        let g = backward(&loss).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_is_zero_for_negative_input() {
        let x = Tensor::param("x", [2], vec![-1.0, 2.0]);
        let g = backward(&x.relu().sum()).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::variable([2], vec![1.0, 2.0]);
        let y = x.scale(2.0);
        assert_eq!(backward(&y).unwrap_err(), TensorError::NonScalarRoot(vec![2]));
    }

    #[test]
    fn untracked_root_is_rejected() {
        let y = Tensor::scalar(3.0);
        assert_eq!(backward(&y).unwrap_err(), TensorError::NotTracked);
    }

    #[test]
    fn second_backward_fails() {
        let x = Tensor::param("x", [2], vec![1.0, 2.0]);
        let y = x.mul(&x).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(backward(&y).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param("x", [1], vec![3.0]);
        let y = x.mul(&x).unwrap();
        let z = y.add(&y).unwrap().sum();
        let g = backward(&z).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[12.0]);
    }

    #[test]
    fn constants_do_not_record_nodes() {
        let a = Tensor::new([2], vec![1.0, 2.0]);
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = Tensor::variable([1], vec![1.0]);
        for _ in 0..200_000 {
            x = x.scale(1.0);
        }
        drop(x);
    }
}
