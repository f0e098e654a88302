//! Pre-norm transformer blocks shared by both encoders.

use un2clip_autograd::{RngStream, Scalar, Tape, Var};

use crate::error::Result;
use crate::params::{Bound, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// How the final block of the image tower is evaluated. Everything except
/// `Standard` is a training-free dense-inference modification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastBlock {
    Standard,
    /// Value projection + output projection only; no attention mixing, no
    /// residual, no feed-forward.
    ValueOnly,
    /// Attention weights from `softmax(q·qᵀ + k·kᵀ)`; rest of the block intact.
    Correlative,
    /// Attention output alone: no residual path, no feed-forward sublayer.
    ResidualFree,
}

/// Tape handles kept for dense-probe surgery.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub input: Var,
    /// `[B·heads, N, head_dim]`
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut RngStream,
) {
    let s = 1.0 / (dim as f64).sqrt();
    store.ones(&format!("{prefix}.ln1.g"), &[dim]);
    store.zeros(&format!("{prefix}.ln1.b"), &[dim]);
    store.randn(&format!("{prefix}.qkv.w"), &[dim, 3 * dim], s, rng);
    store.zeros(&format!("{prefix}.qkv.b"), &[3 * dim]);
    store.randn(&format!("{prefix}.out.w"), &[dim, dim], s, rng);
    store.zeros(&format!("{prefix}.out.b"), &[dim]);
    store.ones(&format!("{prefix}.ln2.g"), &[dim]);
    store.zeros(&format!("{prefix}.ln2.b"), &[dim]);
    store.randn(&format!("{prefix}.fc1.w"), &[dim, hidden], s, rng);
    store.zeros(&format!("{prefix}.fc1.b"), &[hidden]);
    store.randn(
        &format!("{prefix}.fc2.w"),
        &[hidden, dim],
        1.0 / (hidden as f64).sqrt(),
        rng,
    );
    store.zeros(&format!("{prefix}.fc2.b"), &[dim]);
}

/// `[B, N, H·d]` → `[B·H, N, d]`
fn split_heads<T: Scalar>(t: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, n, d] = t.shape(x)[..] else {
        unreachable!()
    };
    let x = t.reshape(x, &[b, n, heads, d / heads])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    Ok(t.reshape(x, &[b * heads, n, d / heads])?)
}

/// `[B·H, N, d]` → `[B, N, H·d]`
fn merge_heads<T: Scalar>(t: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [bh, n, d] = t.shape(x)[..] else {
        unreachable!()
    };
    let x = t.reshape(x, &[bh / heads, heads, n, d])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    Ok(t.reshape(x, &[bh / heads, n, heads * d])?)
}

pub fn block<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mode: LastBlock,
) -> Result<(Var, BlockVars)> {
    let name = |s: &str| format!("{prefix}.{s}");
    let d = *t.shape(x).last().expect("3-D tokens");
    let h = t.layer_norm(x, p[&name("ln1.g")], p[&name("ln1.b")], LN_EPS)?;
    let qkv = t.linear(h, p[&name("qkv.w")], Some(p[&name("qkv.b")]))?;
    let q = t.slice(qkv, 2, 0, d)?;
    let k = t.slice(qkv, 2, d, d)?;
    let v = t.slice(qkv, 2, 2 * d, d)?;
    let (q, k, v) = (
        split_heads(t, q, heads)?,
        split_heads(t, k, heads)?,
        split_heads(t, v, heads)?,
    );
    let vars = BlockVars { input: x, q, k, v };
    let mixed = match mode {
        LastBlock::Standard | LastBlock::ResidualFree => t.attention(q, k, v)?,
        LastBlock::ValueOnly => v,
        LastBlock::Correlative => {
            let scale = 1.0 / ((d / heads) as f64).sqrt();
            let qq = t.matmul_t(q, q, false, true)?;
            let kk = t.matmul_t(k, k, false, true)?;
            let s = t.add(qq, kk)?;
            let s = t.scale(s, scale)?;
            let w = t.softmax(s)?;
            t.matmul(w, v)?
        }
    };
    let mixed = merge_heads(t, mixed, heads)?;
    let attn = t.linear(mixed, p[&name("out.w")], Some(p[&name("out.b")]))?;
    if matches!(mode, LastBlock::ValueOnly | LastBlock::ResidualFree) {
        return Ok((attn, vars));
    }
    let x = t.add(x, attn)?;
    let h = t.layer_norm(x, p[&name("ln2.g")], p[&name("ln2.b")], LN_EPS)?;
    let h = t.linear(h, p[&name("fc1.w")], Some(p[&name("fc1.b")]))?;
    let h = t.gelu(h)?;
    let h = t.linear(h, p[&name("fc2.w")], Some(p[&name("fc2.b")]))?;
    Ok((t.add(x, h)?, vars))
}
