//! Forward definitions (as `Tape` methods) and local gradient rules.

mod axis;
mod basic;
mod conv;
mod linalg;
mod norm;

use crate::numerics::tape::{Node, Op, Sink};
use crate::numerics::Real;

pub use norm::{BatchStats, NormStats};

pub(crate) fn backprop<T: Real>(node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let nodes = sink_nodes(sink);
    match &node.op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Affine { .. }
        | Op::ScaleBy { .. }
        | Op::MulChannel { .. }
        | Op::Relu(_)
        | Op::Sigmoid(_)
        | Op::Reshape(_)
        | Op::Sum(_)
        | Op::WeightedSum { .. }
        | Op::Gather { .. }
        | Op::WeightedCombine { .. } => basic::backward(nodes, node, g, sink),
        Op::Softmax { .. } | Op::LogSoftmax { .. } | Op::MaxAxis { .. } | Op::L2Normalize { .. } => {
            axis::backward(nodes, node, g, sink)
        }
        Op::MatMul { .. } | Op::Linear { .. } | Op::PairwiseDistance(_) | Op::CorrelationMax { .. } => {
            linalg::backward(nodes, node, g, sink)
        }
        Op::Conv2d { .. } | Op::MaxPool2d { .. } | Op::AvgPool2d { .. } | Op::GlobalAvgPool(_) => {
            conv::backward(nodes, node, g, sink)
        }
        Op::BatchNorm { .. } => norm::backward(nodes, node, g, sink),
    }
}

fn sink_nodes<'a, T: Real>(sink: &Sink<'a, T>) -> &'a [Node<T>] {
    sink.nodes()
}
