use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias add, positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_broadcast", format!("{sa:?} + {sb:?}"));
        }
        let bv = self.value(b).data();
        let w = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(w) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = map(self.value(a), |x| x * c);
        Ok(self.push(v, Op::Scale(a, c), &[a]))
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return shape_err("mul_scalar", format!("scale shape {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let v = map(self.value(a), |x| x * c);
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), |x| x.exp());
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }
}

pub(super) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            if sink.wants(*b) {
                let buf = sink.buf(*b);
                for (x, &gi) in buf.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if sink.wants(*a) {
                let buf = sink.buf(*a);
                for ((x, &gi), &y) in buf.iter_mut().zip(g).zip(bv) {
                    *x += gi * y;
                }
            }
            if sink.wants(*b) {
                let buf = sink.buf(*b);
                for ((x, &gi), &y) in buf.iter_mut().zip(g).zip(av) {
                    *x += gi * y;
                }
            }
        }
        Op::AddBroadcast(a, b) => {
            sink.add(*a, g);
            if sink.wants(*b) {
                let w = nodes[b.0].value.len();
                let buf = sink.buf(*b);
                for chunk in g.chunks(w) {
                    for (x, &gi) in buf.iter_mut().zip(chunk) {
                        *x += gi;
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if sink.wants(*a) {
                let buf = sink.buf(*a);
                for (x, &gi) in buf.iter_mut().zip(g) {
                    *x += gi * *c;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let c = val(*s)[0];
            if sink.wants(*a) {
                let buf = sink.buf(*a);
                for (x, &gi) in buf.iter_mut().zip(g) {
                    *x += gi * c;
                }
            }
            if sink.wants(*s) {
                let d: T = g.iter().zip(val(*a)).map(|(&gi, &x)| gi * x).sum();
                sink.buf(*s)[0] += d;
            }
        }
        Op::Exp(a) => {
            if sink.wants(*a) {
                let y = nodes[i].value.data();
                let buf = sink.buf(*a);
                for ((x, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                    *x += gi * yi;
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if sink.wants(*a) {
                let n = nodes[a.0].value.len();
                let gi = match nodes[i].op {
                    Op::Mean(_) => g[0] / T::from_f64(n as f64),
                    _ => g[0],
                };
                for x in sink.buf(*a) {
                    *x += gi;
                }
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}
