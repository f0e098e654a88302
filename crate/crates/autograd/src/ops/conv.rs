use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Zero padding for a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size (odd kernels only).
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(cin: usize, h: usize, w: usize, k: usize, pad: usize) -> Self {
        Self {
            cin,
            h,
            w,
            k,
            pad,
            oh: h + 2 * pad + 1 - k,
            ow: w + 2 * pad + 1 - k,
        }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geom, cols: &mut [T]) {
    let (hw_out, k) = (g.col_cols(), g.k);
    for c in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: Geom, dx: &mut [T]) {
    let (hw_out, k) = (g.col_cols(), g.k);
    for c in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn nchw(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 2-D convolution. `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (Some((b, cin, h, wd)), Some((cout, cin_w, kh, kw))) = (nchw(&sx), nchw(&sw)) else {
            return shape_err("conv2d", format!("{sx:?} * {sw:?}: need 4-D operands"));
        };
        if cin != cin_w || kh != kw {
            return shape_err("conv2d", format!("{sx:?} * {sw:?}"));
        }
        let pad = match padding {
            Padding::Same if kh % 2 == 1 => kh / 2,
            Padding::Same => return shape_err("conv2d", "same padding needs an odd kernel"),
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh} larger than input {h}x{wd}"));
        }
        let g = Geom::new(cin, h, wd, kh, pad);
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = vec![T::zero(); b * cout * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for n in 0..b {
            im2col(&xv[n * cin * h * wd..], g, &mut cols);
            T::gemm(
                cout,
                rows,
                ncols,
                wv,
                false,
                &cols,
                false,
                &mut out[n * cout * ncols..],
                false,
            );
        }
        let t = Tensor::from_vec(&[b, cout, g.oh, g.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, pad }, &[x, w]))
    }

    /// Adds a per-channel vector to an NCHW map. `c` is `[C]` (bias) or
    /// `[B, C]` (per-sample conditioning).
    pub fn add_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sc = self.shape(c).to_vec();
        let Some((b, ch, h, w)) = nchw(&sx) else {
            return shape_err("add_channel", format!("{sx:?}: need NCHW"));
        };
        let per_sample = match sc[..] {
            [n] if n == ch => false,
            [bb, n] if bb == b && n == ch => true,
            _ => return shape_err("add_channel", format!("{sx:?} + {sc:?}")),
        };
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(x).clone();
        for (idx, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (n, k) = (idx / ch, idx % ch);
            let add = if per_sample { cv[n * ch + k] } else { cv[k] };
            plane.iter_mut().for_each(|v| *v += add);
        }
        Ok(self.push(out, Op::AddChannel(x, c), &[x, c]))
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some((b, c, h, w)) = nchw(&sx) else {
            return shape_err("avg_pool2", format!("{sx:?}: need NCHW"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2", format!("{sx:?}: odd spatial size"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &xv[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = s * quarter;
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some((b, c, h, w)) = nchw(&sx) else {
            return shape_err("upsample2", format!("{sx:?}: need NCHW"));
        };
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample2(x), &[x]))
    }
}

pub(super) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<T>) {
    match nodes[i].op {
        Op::Conv2d { x, w, pad } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (b, cin, h, wd) = nchw(sx).unwrap();
            let (cout, _, k, _) = nchw(sw).unwrap();
            let geom = Geom::new(cin, h, wd, k, pad);
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            let mut cols = vec![T::zero(); rows * ncols];
            if sink.wants(w) {
                let buf = sink.buf(w);
                for n in 0..b {
                    im2col(&xv[n * cin * h * wd..], geom, &mut cols);
                    let gn = &g[n * cout * ncols..];
                    T::gemm(cout, ncols, rows, gn, false, &cols, true, buf, true);
                }
            }
            if sink.wants(x) {
                let buf = sink.buf(x);
                for n in 0..b {
                    let gn = &g[n * cout * ncols..];
                    T::gemm(rows, cout, ncols, wv, true, gn, false, &mut cols, false);
                    col2im(&cols, geom, &mut buf[n * cin * h * wd..]);
                }
            }
        }
        Op::AddChannel(x, c) => {
            sink.add(x, g);
            if sink.wants(c) {
                let (_, ch, h, w) = nchw(nodes[x.0].value.shape()).unwrap();
                let per_sample = nodes[c.0].value.ndim() == 2;
                let buf = sink.buf(c);
                for (idx, plane) in g.chunks(h * w).enumerate() {
                    let (n, k) = (idx / ch, idx % ch);
                    let s: T = plane.iter().copied().sum();
                    if per_sample {
                        buf[n * ch + k] += s;
                    } else {
                        buf[k] += s;
                    }
                }
            }
        }
        Op::AvgPool2(x) => {
            if sink.wants(x) {
                let (b, c, h, w) = nchw(nodes[x.0].value.shape()).unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let buf = sink.buf(x);
                for p in 0..b * c {
                    for y in 0..h {
                        for xx in 0..w {
                            buf[p * h * w + y * w + xx] +=
                                g[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
            }
        }
        Op::Upsample2(x) => {
            if sink.wants(x) {
                let (b, c, h, w) = nchw(nodes[x.0].value.shape()).unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let buf = sink.buf(x);
                for p in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            buf[p * h * w + (y / 2) * w + xx / 2] += g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
            }
        }
        _ => unreachable!("not a convolution op"),
    }
}
