mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use conv::Padding;

use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op};

pub(crate) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    match nodes[i].op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::AddBroadcast(..)
        | Op::Scale(..)
        | Op::MulScalar(..)
        | Op::Exp(..)
        | Op::Sum(..)
        | Op::Mean(..) => elementwise::backward(nodes, i, g, sink),
        Op::MatMul { .. } => linalg::backward(nodes, i, g, sink),
        Op::Conv2d { .. } | Op::AddChannel(..) | Op::AvgPool2(..) | Op::Upsample2(..) => {
            conv::backward(nodes, i, g, sink)
        }
        Op::Softmax(..)
        | Op::LayerNorm { .. }
        | Op::Gelu(..)
        | Op::Silu(..)
        | Op::Embedding { .. }
        | Op::L2Normalize { .. }
        | Op::CrossEntropy { .. }
        | Op::Sinusoidal { .. } => nn::backward(nodes, i, g, sink),
        Op::Reshape(..) | Op::Permute { .. } | Op::Concat { .. } | Op::Slice { .. } => {
            shape::backward(nodes, i, g, sink)
        }
    }
}
