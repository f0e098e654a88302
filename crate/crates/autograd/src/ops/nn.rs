use crate::error::{shape_err, AutogradError, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

const L2_EPS: f64 = 1e-12;

fn last_dim<T: Scalar>(t: &Tensor<T>) -> usize {
    *t.shape().last().expect("non-empty shape")
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Frequencies of the sinusoidal timestep embedding.
fn frequencies(half: usize) -> impl Iterator<Item = f64> {
    (0..half).map(move |i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
}

impl<T: Scalar> Tape<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.value(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xv.clone();
        let rows = xv.len() / d;
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let dn = T::from_f64(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + T::from_f64(eps)).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = T::from_f64(gelu_parts(v.as_f64()).0);
        }
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let f = v.as_f64();
            *v = T::from_f64(f * sigmoid(f));
        }
        Ok(self.push(out, Op::Silu(x), &[x]))
    }

    /// Rows of `table` (`[V, D]`) selected by `ids`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [v, d] = st[..] else {
            return shape_err("embedding", format!("table {st:?}: need 2-D"));
        };
        if ids.is_empty() {
            return shape_err("embedding", "no ids");
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutogradError::Contract(format!(
                "embedding id {bad} out of range for vocabulary of {v}"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::from_vec(&[ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Scale each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = row
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::from_f64(L2_EPS));
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. `logits`: `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let [b, c] = sl[..] else {
            return shape_err("cross_entropy", format!("logits {sl:?}: need 2-D"));
        };
        if targets.len() != b {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            );
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(AutogradError::Contract(format!(
                "target {t} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::Contract("non-finite logits".into()));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::from_f64(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Fixed sinusoidal embedding of scalar positions `t` (`[B]`) into
    /// `[B, dim]`: sines in the first half, cosines in the second.
    pub fn sinusoidal(&mut self, t: Var, dim: usize) -> Result<Var> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return shape_err("sinusoidal", format!("dim {dim} must be even and positive"));
        }
        let st = self.shape(t).to_vec();
        if st.len() != 1 {
            return shape_err("sinusoidal", format!("positions {st:?}: need 1-D"));
        }
        let half = dim / 2;
        let tv = self.value(t).data();
        let mut out = Vec::with_capacity(tv.len() * dim);
        for &p in tv {
            let p = p.as_f64();
            let mut s: Vec<T> = Vec::with_capacity(dim);
            s.extend(frequencies(half).map(|f| T::from_f64((p * f).sin())));
            s.extend(frequencies(half).map(|f| T::from_f64((p * f).cos())));
            out.extend(s);
        }
        let v = Tensor::from_vec(&[st[0], dim], out)?;
        Ok(self.push(v, Op::Sinusoidal { t, dim }, &[t]))
    }
}

pub(super) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Softmax(x) => {
            if !sink.wants(*x) {
                return;
            }
            let d = last_dim(&nodes[i].value);
            let buf = sink.buf(*x);
            for ((yr, gr), br) in out.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                for j in 0..d {
                    br[j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = nodes[x.0].value.data();
            let gv = nodes[gamma.0].value.data();
            let d = gv.len();
            let dn = T::from_f64(d as f64);
            let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
            if sink.wants(*x) {
                let buf = sink.buf(*x);
                for r in 0..mean.len() {
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat(r, j);
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        buf[r * d + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                    }
                }
            }
            if sink.wants(*gamma) {
                let buf = sink.buf(*gamma);
                for r in 0..mean.len() {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat(r, j);
                    }
                }
            }
            if sink.wants(*beta) {
                let buf = sink.buf(*beta);
                for r in 0..mean.len() {
                    for j in 0..d {
                        buf[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Gelu(x) | Op::Silu(x) => {
            if !sink.wants(*x) {
                return;
            }
            let gelu = matches!(nodes[i].op, Op::Gelu(_));
            let xv = nodes[x.0].value.data();
            let buf = sink.buf(*x);
            for ((b, &gg), &xx) in buf.iter_mut().zip(g).zip(xv) {
                let f = xx.as_f64();
                let d = if gelu {
                    gelu_parts(f).1
                } else {
                    let s = sigmoid(f);
                    s * (1.0 + f * (1.0 - s))
                };
                *b += gg * T::from_f64(d);
            }
        }
        Op::Embedding { table, ids } => {
            if !sink.wants(*table) {
                return;
            }
            let d = nodes[table.0].value.shape()[1];
            let buf = sink.buf(*table);
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    buf[id * d + j] += g[r * d + j];
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            if !sink.wants(*x) {
                return;
            }
            let d = last_dim(&nodes[i].value);
            let buf = sink.buf(*x);
            for (r, &n) in norms.iter().enumerate() {
                let yr = &out[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                for j in 0..d {
                    buf[r * d + j] += (gr[j] - yr[j] * dot) / n;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if !sink.wants(*logits) {
                return;
            }
            let b = targets.len();
            let c = probs.len() / b;
            let scale = g[0] / T::from_f64(b as f64);
            let buf = sink.buf(*logits);
            for r in 0..b {
                for j in 0..c {
                    let onehot = if j == targets[r] { T::one() } else { T::zero() };
                    buf[r * c + j] += scale * (probs[r * c + j] - onehot);
                }
            }
        }
        Op::Sinusoidal { t, dim } => {
            if !sink.wants(*t) {
                return;
            }
            let half = dim / 2;
            let tv = nodes[t.0].value.data().to_vec();
            let buf = sink.buf(*t);
            for (r, &p) in tv.iter().enumerate() {
                let p = p.as_f64();
                let mut acc = 0.0;
                for (j, f) in frequencies(half).enumerate() {
                    acc += g[r * dim + j].as_f64() * f * (p * f).cos();
                    acc -= g[r * dim + half + j].as_f64() * f * (p * f).sin();
                }
                buf[r] += T::from_f64(acc);
            }
        }
        _ => unreachable!("not a network op"),
    }
}
