//! Wengert tape: the forward pass appends nodes, `backward` replays them in
//! reverse and accumulates vector-Jacobian products.

use std::collections::BTreeMap;

use crate::error::{AutogradError, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Stable identity of a trainable parameter across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

impl ParamKey {
    pub const fn new(group: u32, index: u32) -> Self {
        Self { group, index }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        pad: usize,
    },
    AddChannel(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sinusoidal {
        t: Var,
        dim: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    params: BTreeMap<ParamKey, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// Trainable leaf. Registering the same key twice is a contract violation.
    pub fn param(&mut self, value: &Tensor<T>, key: ParamKey) -> Result<Var> {
        if self.params.contains_key(&key) {
            return Err(AutogradError::Contract(format!(
                "parameter {key:?} registered twice"
            )));
        }
        let v = self.push_node(value.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        Ok(v)
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.params.keys()
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    ///
    /// Every registered parameter appears in the result; parameters the root
    /// does not depend on get zeros.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AutogradError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            ops::backward(&self.nodes, i, &g, &mut acc);
        }
        let mut out = BTreeMap::new();
        for (key, var) in &self.params {
            let shape = self.nodes[var.0].value.shape();
            let t = match grads[var.0].take() {
                Some(g) => Tensor::from_vec(shape, g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(*key, t);
        }
        Ok(Gradients { map: out })
    }
}

/// Accumulates input-gradient contributions during the reverse sweep.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first touch.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub(crate) fn add(&mut self, v: Var, contrib: &[T]) {
        if !self.wants(v) {
            return;
        }
        let b = self.buf(v);
        for (x, &c) in b.iter_mut().zip(contrib) {
            *x += c;
        }
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    map: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True when any parameter of `group` received a non-zero gradient.
    pub fn touches_group(&self, group: u32) -> bool {
        self.map
            .iter()
            .any(|(k, g)| k.group == group && g.data().iter().any(|x| *x != T::zero()))
    }
}
