//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes. Every operation
//! appends one node holding its output value, the indices of its parents, and
//! a backward closure that maps the output gradient to per-parent gradients.
//! [`Tape::backward`] walks the list in reverse and accumulates gradients into
//! the leaves.
//!
//! The tape is generic over the element type: training runs at `f32`,
//! finite-difference gradient checks run the same code at `f64`. Everything is
//! single-threaded with fixed iteration orders, so a given graph evaluates
//! bit-identically from run to run.

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod sample;
mod shape;

use ndarray::{ArrayD, LinalgScalar};
use num_traits::{Float, FloatConst};

/// Element type the tape can compute with.
pub trait Scalar:
    LinalgScalar
    + Float
    + FloatConst
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Backward closure: (output gradient, parent values, output value) -> one
/// gradient array per parent, in parent order.
type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[&ArrayD<F>], &ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. Leaves have no backward function; gradients
    /// accumulate into them and can be read back after [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Leaf from an f64 array, converting into the tape's element type.
    pub fn leaf_f64(&mut self, value: &ArrayD<f64>) -> Var {
        self.leaf(value.mapv(F::from_f64))
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeding its gradient with ones. Gradients of
    /// interior nodes are dropped once consumed; leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.backward {
                Some(back) => {
                    let parent_vals: Vec<&ArrayD<F>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let pgrads = back(&g, &parent_vals, &node.value);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => grads[i] = Some(g),
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
