//! A small reverse-mode autodiff engine over dense `f32` tensors.
//!
//! Tensors are immutable, reference counted, and record the operation that
//! produced them when gradient tracking is enabled and at least one input
//! requires a gradient. Calling [`Tensor::backward`] walks the recorded graph
//! in reverse topological order and returns the gradients of every leaf that
//! requires one.
//!
//! The engine is single-threaded and every reduction runs in a fixed order, so
//! results are bit-reproducible across runs on one machine.

mod conv;
mod gemm;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use conv::conv_output_size;
pub(crate) use gemm::gemm;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Disables graph recording until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Backward closure: `(grad_out, parents, needs_grad) -> per-parent grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[Tensor], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Rc<Vec<f32>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner { id: next_id(), shape, data, requires_grad, node: None }))
    }

    /// A constant leaf.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Self {
        Self::leaf(Rc::new(data), shape.to_vec(), false)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Self {
        Self::leaf(Rc::new(data), shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(value: f32, shape: &[usize]) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![value], &[])
    }

    pub(crate) fn from_op(
        data: Rc<Vec<f32>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(data, shape, false);
        }
        assert_eq!(data.len(), numel(&shape), "op produced inconsistent shape {:?}", shape);
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad: true,
            node: Some(Node { parents, backward }),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f32>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Gradients of this scalar with respect to every leaf that requires one.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got {:?}", self.shape());
        self.backward_with(vec![1.0])
    }

    /// Vector-Jacobian product seeded with `seed` (same shape as `self`).
    pub fn backward_with(&self, seed: Vec<f32>) -> Gradients {
        assert_eq!(seed.len(), self.numel(), "seed length mismatch");
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => {
                    grads.map.insert(t.id(), g);
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let pgrads = (node.backward)(&g, &node.parents, &needs);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for ((p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        grads
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients keyed by tensor id.
#[derive(Default, Debug)]
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }
}

/// A differentiable operation implemented outside the engine.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Returns output data and shape.
    fn forward(&self, inputs: &[&[f32]]) -> (Vec<f32>, Vec<usize>);
    /// Returns gradients for each input.
    fn backward(&self, inputs: &[&[f32]], output: &[f32], grad_out: &[f32]) -> Vec<Option<Vec<f32>>>;
}

pub fn custom_op(op: Rc<dyn CustomOp>, inputs: &[&Tensor]) -> Tensor {
    let datas: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
    let (data, shape) = op.forward(&datas);
    let out = Rc::new(data);
    let saved = out.clone();
    Tensor::from_op(
        out,
        shape,
        inputs.iter().map(|t| (*t).clone()).collect(),
        Box::new(move |g, parents, _| {
            let datas: Vec<&[f32]> = parents.iter().map(|t| t.data()).collect();
            op.backward(&datas, &saved, g)
        }),
    )
}
