use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (of `shape`) into `dst` laid out by `axes`. When `scatter`
/// is set the roles flip: `src` is in permuted layout and is added into `dst`.
fn permute_into<T: Scalar>(
    src: &[T],
    shape: &[usize],
    axes: &[usize],
    dst: &mut [T],
    scatter: bool,
) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for o in 0..src.len() {
        if scatter {
            dst[off] += src[o];
        } else {
            dst[o] = src[off];
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= gather[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, axis size, inner)` split of `shape` at `axis`.
fn split_at(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", format!("axes {axes:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        permute_into(src, &shape, axes, &mut out, false);
        let t = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return shape_err("concat", format!("{sa:?} ++ {sb:?} on axis {axis}"));
        }
        let (outer, na, inner) = split_at(&sa, axis);
        let nb = sb[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&bv[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = na + nb;
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Concat { a, b, axis }, &[a, b]))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(
                "slice",
                format!("{start}..{} of axis {axis} in {shape:?}", start + len),
            );
        }
        let (outer, n, inner) = split_at(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let t = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }
}

pub(super) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    match &nodes[i].op {
        Op::Reshape(x) => sink.add(*x, g),
        Op::Permute { x, axes } => {
            if sink.wants(*x) {
                let shape = nodes[x.0].value.shape().to_vec();
                let buf = sink.buf(*x);
                permute_into(g, &shape, axes, buf, true);
            }
        }
        Op::Concat { a, b, axis } => {
            let sa = nodes[a.0].value.shape();
            let (outer, na, inner) = split_at(sa, *axis);
            let nb = nodes[b.0].value.shape()[*axis];
            let (wa, wb) = (na * inner, nb * inner);
            for (v, off, w) in [(*a, 0, wa), (*b, wa, wb)] {
                if !sink.wants(v) {
                    continue;
                }
                let buf = sink.buf(v);
                for o in 0..outer {
                    let src = &g[o * (wa + wb) + off..o * (wa + wb) + off + w];
                    for (d, &s) in buf[o * w..(o + 1) * w].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Slice { x, axis, start } => {
            if sink.wants(*x) {
                let shape = nodes[x.0].value.shape().to_vec();
                let (outer, n, inner) = split_at(&shape, *axis);
                let len = nodes[i].value.shape()[*axis];
                let buf = sink.buf(*x);
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in buf[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
