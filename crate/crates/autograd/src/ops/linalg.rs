use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// (batch, rows, cols) of a 2-D or 3-D operand as stored.
fn dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    /// Matrix product of 2-D operands, or batched product of 3-D operands with
    /// equal batch size. `ta`/`tb` transpose the last two axes of the stored
    /// operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((ba, ra, ca)), Some((bb, rb, cb))) = (dims(&sa), dims(&sb)) else {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: need 2-D or 3-D"));
        };
        if sa.len() != sb.len() || ba != bb {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: batch mismatch"));
        }
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); ba * m * n];
        for p in 0..ba {
            T::gemm(
                m,
                k,
                n,
                &av[p * m * k..],
                ta,
                &bv[p * k * n..],
                tb,
                &mut out[p * m * n..],
                false,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![ba, m, n]
        };
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x·W + b` applied over the last axis of `x`, any leading shape.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("non-empty shape");
        let lead: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, &[lead.max(1), d])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b)?;
        }
        let e = self.shape(y)[1];
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(e);
        self.reshape(y, &out_shape)
    }
}

pub(super) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    let Op::MatMul { a, b, ta, tb } = nodes[i].op else {
        unreachable!()
    };
    let sa = nodes[a.0].value.shape();
    let sb = nodes[b.0].value.shape();
    let (batch, ra, ca) = dims(sa).unwrap();
    let (_, rb, cb) = dims(sb).unwrap();
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let n = if tb { rb } else { cb };
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    if sink.wants(a) {
        let buf = sink.buf(a);
        for p in 0..batch {
            let gp = &g[p * m * n..];
            let bp = &bv[p * k * n..];
            let dst = &mut buf[p * m * k..];
            if ta {
                // stored A is k×m: dA = op(B)·Gᵀ
                T::gemm(k, n, m, bp, tb, gp, true, dst, true);
            } else {
                // dA (m×k) = G·op(B)ᵀ
                T::gemm(m, n, k, gp, false, bp, !tb, dst, true);
            }
        }
    }
    if sink.wants(b) {
        let buf = sink.buf(b);
        for p in 0..batch {
            let gp = &g[p * m * n..];
            let ap = &av[p * m * k..];
            let dst = &mut buf[p * k * n..];
            if tb {
                // stored B is n×k: dB = Gᵀ·op(A)
                T::gemm(n, m, k, gp, true, ap, ta, dst, true);
            } else {
                // dB (k×n) = op(A)ᵀ·G
                T::gemm(k, m, n, ap, !ta, gp, false, dst, true);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `softmax(q·kᵀ / √d)·v` over `[batch, tokens, d]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.shape(q).last().expect("non-empty shape");
        let scores = self.matmul_t(q, k, false, true)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax(scores)?;
        self.matmul(weights, v)
    }
}
