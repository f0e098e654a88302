use serde::{Deserialize, Serialize};
use un2clip_autograd::{Padding, RngStream, Scalar, Tape, Tensor, Var};

use crate::corpus::render::{CHANNELS, IMAGE_SIZE};
use crate::error::{CoreError, Result};
use crate::io::checkpoint::{Checkpoint, Metadata};
use crate::params::{group, Bound, ParamStore};

pub const DENOISER_KIND: &str = "denoiser";
const LEVELS: usize = 3;

/// Encoder–decoder sizes. `channels[i]` is the width at resolution `32 / 2^i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub channels: [usize; LEVELS],
    /// Width of the conditioning vector (and of the timestep embedding).
    pub cond_dim: usize,
    /// Width of the image embedding the network is conditioned on.
    pub embed_dim: usize,
    /// Also inject a learned spatial map of the conditioning vector at the
    /// coarsest resolution.
    pub spatial_cond: bool,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            channels: [16, 32, 32],
            cond_dim: 64,
            embed_dim: 64,
            spatial_cond: true,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0)
            || self.embed_dim == 0
            || self.cond_dim == 0
            || !self.cond_dim.is_multiple_of(2)
        {
            return Err(CoreError::Config(
                "denoiser widths must be positive, cond_dim even".into(),
            ));
        }
        Ok(())
    }

    fn coarse(&self) -> usize {
        IMAGE_SIZE >> (LEVELS - 1)
    }
}

/// The conditional noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T: Scalar = f32> {
    pub arch: DenoiserArch,
    pub params: ParamStore<T>,
}

fn conv_init<T: Scalar>(
    s: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut RngStream,
) {
    let fan_in = (cin * k * k) as f64;
    s.randn(
        &format!("{name}.w"),
        &[cout, cin, k, k],
        (1.0 / fan_in).sqrt(),
        rng,
    );
    s.zeros(&format!("{name}.b"), &[cout]);
}

fn linear_init<T: Scalar>(
    s: &mut ParamStore<T>,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut RngStream,
) {
    s.randn(
        &format!("{name}.w"),
        &[din, dout],
        (1.0 / din as f64).sqrt(),
        rng,
    );
    s.zeros(&format!("{name}.b"), &[dout]);
}

fn block_init<T: Scalar>(
    s: &mut ParamStore<T>,
    name: &str,
    c: usize,
    cd: usize,
    rng: &mut RngStream,
) {
    conv_init(s, &format!("{name}.c1"), c, c, 3, rng);
    linear_init(s, &format!("{name}.cond"), cd, c, rng);
    conv_init(s, &format!("{name}.c2"), c, c, 3, rng);
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(arch: DenoiserArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let [c0, c1, c2] = arch.channels;
        let cd = arch.cond_dim;
        let mut s = ParamStore::new(group::DENOISER);
        linear_init(&mut s, "cond.emb", arch.embed_dim, cd, rng);
        linear_init(&mut s, "cond.hid", cd, cd, rng);
        conv_init(&mut s, "in", c0, CHANNELS, 3, rng);
        block_init(&mut s, "down0", c0, cd, rng);
        conv_init(&mut s, "down1.from", c1, c0, 3, rng);
        block_init(&mut s, "down1", c1, cd, rng);
        conv_init(&mut s, "down2.from", c2, c1, 3, rng);
        block_init(&mut s, "down2", c2, cd, rng);
        if arch.spatial_cond {
            let cells = arch.coarse() * arch.coarse();
            s.randn(
                "spatial.w",
                &[cd, c2 * cells],
                (1.0 / cd as f64).sqrt(),
                rng,
            );
            s.zeros("spatial.b", &[c2 * cells]);
        }
        conv_init(&mut s, "up1.from", c1, c2, 1, rng);
        block_init(&mut s, "up1", c1, cd, rng);
        conv_init(&mut s, "up0.from", c0, c1, 1, rng);
        block_init(&mut s, "up0", c0, cd, rng);
        s.zeros("out.w", &[CHANNELS, c0, 3, 3]);
        s.zeros("out.b", &[CHANNELS]);
        Ok(Self { arch, params: s })
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    /// Noise estimate for `[B, 3, 32, 32]` inputs at steps `t` under
    /// embeddings `emb` (`[B, embed_dim]`).
    pub fn predict(&self, x_t: &Tensor<T>, t: &[usize], emb: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::<T>::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(x_t.clone());
        let e = tape.constant(emb.clone());
        let out = denoiser_graph(&mut tape, &p, &self.arch, x, t, e)?;
        Ok(tape.value(out).clone())
    }
}

fn conv<T: Scalar>(t: &mut Tape<T>, p: &Bound, name: &str, x: Var, pad: Padding) -> Result<Var> {
    let y = t.conv2d(x, p[&format!("{name}.w")], pad)?;
    Ok(t.add_channel(y, p[&format!("{name}.b")])?)
}

fn res_block<T: Scalar>(t: &mut Tape<T>, p: &Bound, name: &str, x: Var, h: Var) -> Result<Var> {
    let y = t.silu(x)?;
    let y = conv(t, p, &format!("{name}.c1"), y, Padding::Same)?;
    let c = t.linear(
        h,
        p[&format!("{name}.cond.w")],
        Some(p[&format!("{name}.cond.b")]),
    )?;
    let y = t.add_channel(y, c)?;
    let y = t.silu(y)?;
    let y = conv(t, p, &format!("{name}.c2"), y, Padding::Same)?;
    Ok(t.add(x, y)?)
}

/// `ε_G(x_t, t, emb)` on a tape. `x`: `[B, 3, 32, 32]`, `emb`: `[B, E]`.
pub fn denoiser_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    arch: &DenoiserArch,
    x: Var,
    t: &[usize],
    emb: Var,
) -> Result<Var> {
    let b = t.len();
    if tape.shape(x) != [b, CHANNELS, IMAGE_SIZE, IMAGE_SIZE]
        || tape.shape(emb) != [b, arch.embed_dim]
    {
        return Err(CoreError::Image(format!(
            "denoiser inputs {:?} / {:?} do not match {b} timesteps",
            tape.shape(x),
            tape.shape(emb)
        )));
    }
    let steps = tape.constant(Tensor::from_f64s(
        &[b],
        &t.iter().map(|&s| s as f64).collect::<Vec<_>>(),
    )?);
    let temb = tape.sinusoidal(steps, arch.cond_dim)?;
    // Unit-norm embeddings have entries of order 1/sqrt(E); rescale so the
    // embedding path starts at the same magnitude as the timestep code.
    let emb = tape.scale(emb, (arch.embed_dim as f64).sqrt())?;
    let eproj = tape.linear(emb, p["cond.emb.w"], Some(p["cond.emb.b"]))?;
    let c = tape.add(temb, eproj)?;
    let h = tape.linear(c, p["cond.hid.w"], Some(p["cond.hid.b"]))?;
    let h = tape.silu(h)?;

    let x0 = conv(tape, p, "in", x, Padding::Same)?;
    let s0 = res_block(tape, p, "down0", x0, h)?;
    let x1 = tape.avg_pool2(s0)?;
    let x1 = conv(tape, p, "down1.from", x1, Padding::Same)?;
    let s1 = res_block(tape, p, "down1", x1, h)?;
    let x2 = tape.avg_pool2(s1)?;
    let mut x2 = conv(tape, p, "down2.from", x2, Padding::Same)?;
    if arch.spatial_cond {
        let n = arch.coarse();
        let m = tape.linear(h, p["spatial.w"], Some(p["spatial.b"]))?;
        let m = tape.reshape(m, &[b, arch.channels[2], n, n])?;
        x2 = tape.add(x2, m)?;
    }
    let x2 = res_block(tape, p, "down2", x2, h)?;

    let u1 = conv(tape, p, "up1.from", x2, Padding::Same)?;
    let u1 = tape.upsample2(u1)?;
    let u1 = tape.add(u1, s1)?;
    let u1 = res_block(tape, p, "up1", u1, h)?;
    let u0 = conv(tape, p, "up0.from", u1, Padding::Same)?;
    let u0 = tape.upsample2(u0)?;
    let u0 = tape.add(u0, s0)?;
    let u0 = res_block(tape, p, "up0", u0, h)?;
    let y = tape.silu(u0)?;
    conv(tape, p, "out", y, Padding::Same)
}

/// `[32, 32, 3]` images in `[0, 1]` to `[B, 3, 32, 32]` in `[-1, 1]`.
pub fn to_model_space(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = vec![0f32; images.len() * CHANNELS * px];
    for (i, img) in images.iter().enumerate() {
        crate::clip::check_image(img)?;
        let base = i * CHANNELS * px;
        for (j, rgb) in img.data().chunks(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[base + c * px + j] = rgb[c] * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(
        &[images.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        out,
    )?)
}

/// Item `i` of a `[B, 3, 32, 32]` model-space batch as a `[32, 32, 3]`
/// image clamped to `[0, 1]`.
pub fn to_image(batch: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let src = &batch.data()[i * CHANNELS * px..(i + 1) * CHANNELS * px];
    let mut out = vec![0f32; CHANNELS * px];
    for j in 0..px {
        for c in 0..CHANNELS {
            out[j * CHANNELS + c] = ((src[c * px + j] + 1.0) * 0.5).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], out).expect("fixed shape")
}

impl Denoiser<f32> {
    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.extra.insert(
            "arch".into(),
            serde_json::to_string(&self.arch).expect("serializable"),
        );
        let mut ck = Checkpoint::new(DENOISER_KIND, metadata);
        for (n, t) in self.params.iter() {
            ck.push(n, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != DENOISER_KIND {
            return Err(CoreError::KindMismatch {
                expected: DENOISER_KIND.into(),
                found: ck.kind.clone(),
            });
        }
        let arch: DenoiserArch = ck
            .metadata
            .extra
            .get("arch")
            .ok_or_else(|| CoreError::Checkpoint("denoiser checkpoint lacks architecture".into()))
            .and_then(|s| {
                serde_json::from_str(s).map_err(|e| CoreError::Checkpoint(e.to_string()))
            })?;
        let template = Denoiser::<f32>::new(arch, &mut RngStream::new(0))?;
        Ok(Self {
            arch,
            params: ParamStore::load_like(&template.params, ck.tensors.clone())?,
        })
    }
}
