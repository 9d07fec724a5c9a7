//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; backward walks it once from the loss towards the
//! leaves. Gradients of intermediate nodes are dropped as soon as they
//! have been propagated; only leaf gradients are kept in [`Grads`].

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::ops;
use crate::numerics::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Geometry of a 2-d convolution, resolved at record time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Axis split of a shape into `(outer, axis_len, inner)`.
pub(crate) type AxisDims = (usize, usize, usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    ScaleBy { x: Var, s: Var },
    MulChannel { x: Var, g: Var },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    WeightedSum { x: Var, w: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    Softmax { x: Var, dims: AxisDims },
    LogSoftmax { x: Var, dims: AxisDims },
    MaxAxis { x: Var, argmax: Vec<usize> },
    L2Normalize { x: Var, dims: AxisDims, norms: Vec<T>, eps: T },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, k: usize },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    WeightedCombine { xs: Vec<Var>, w: Var },
    PairwiseDistance(Var),
    CorrelationMax { x: Var, argmax: Vec<usize>, channels: usize, positions: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Affine { x, .. }
            | Relu(x)
            | Sigmoid(x)
            | Reshape(x)
            | Sum(x)
            | WeightedSum { x, .. }
            | Gather { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | MaxAxis { x, .. }
            | L2Normalize { x, .. }
            | MaxPool2d { x, .. }
            | AvgPool2d { x, .. }
            | GlobalAvgPool(x)
            | PairwiseDistance(x)
            | CorrelationMax { x, .. } => vec![*x],
            ScaleBy { x, s } => vec![*x, *s],
            MulChannel { x, g } => vec![*x, *g],
            MatMul { a, b, .. } => vec![*a, *b],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            WeightedCombine { xs, w } => {
                let mut v = xs.clone();
                v.push(*w);
                v
            }
        }
    }
}

/// Accumulates gradient contributions for the inputs of one node.
pub(crate) struct Sink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<'a, T: Real> Sink<'a, T> {
    pub fn nodes(&self) -> &'a [Node<T>] {
        self.nodes
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised (on first use) gradient buffer of `v`.
    pub fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn add(&mut self, v: Var, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records tensor operations for one forward/backward pair.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Records a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a derived node; it requires grad iff any input does.
    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let next = self.nodes.len();
        assert!(inputs.iter().all(|v| v.0 < next), "tape inputs must precede their consumer");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, value, op, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Propagates d`loss`/d(leaf) to every leaf recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        ensure_arg!(loss.0 < self.nodes.len(), "loss is not on this tape");
        let loss_node = &self.nodes[loss.0];
        ensure_arg!(
            loss_node.value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            loss_node.shape
        );
        if !loss_node.value[0].is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::Internal(format!("node {i} depends on a later node")));
            }
            let mut sink = Sink { grads: &mut grads, nodes: &self.nodes };
            ops::backprop(node, &g, &mut sink);
        }
        Ok(Grads { grads })
    }
}
