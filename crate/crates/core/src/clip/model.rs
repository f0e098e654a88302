use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use un2clip_autograd::{RngStream, Scalar, Tape, Tensor, Var};

use super::transformer::{block, init_block, BlockVars, LastBlock, LN_EPS};
use crate::corpus::caption::{model_input, vocab_size, MAX_TOKENS};
use crate::corpus::render::{CHANNELS, IMAGE_SIZE};
use crate::error::{CoreError, Result};
use crate::io::checkpoint::{Checkpoint, Metadata};
use crate::params::{group, Bound, ParamStore};

pub const CLIP_KIND: &str = "clip";
/// `exp(log_scale)` is capped here after every update.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
const INIT_TEMPERATURE: f64 = 0.07;
const ENCODE_CHUNK: usize = 64;

/// Encoder sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipArch {
    pub dim: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub image_depth: usize,
    pub text_depth: usize,
}

impl Default for ClipArch {
    fn default() -> Self {
        Self {
            dim: 64,
            patch: 4,
            heads: 4,
            mlp_hidden: 128,
            image_depth: 2,
            text_depth: 2,
        }
    }
}

impl ClipArch {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !IMAGE_SIZE.is_multiple_of(self.patch) {
            return Err(CoreError::Config(format!(
                "patch size {} must divide {IMAGE_SIZE}",
                self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.image_depth == 0 || self.text_depth == 0 || self.mlp_hidden == 0 {
            return Err(CoreError::Config(
                "encoder depth and hidden width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        IMAGE_SIZE / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// Image tower, text tower and the learnable logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel<T: Scalar = f32> {
    pub arch: ClipArch,
    pub image: ParamStore<T>,
    pub text: ParamStore<T>,
    /// Holds `log_scale`; logits are `exp(log_scale) · cos`.
    pub temperature: ParamStore<T>,
}

/// Result of encoding one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    /// Unit-norm embedding, `[dim]`.
    pub global: Tensor<f32>,
    /// Final-layer patch tokens before the output norm, `[patches, dim]`.
    pub patch_tokens: Tensor<f32>,
    pub attention_internals: Vec<AttentionInternals>,
}

/// Per-block attention inputs, each `[heads, tokens, head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInternals {
    pub input: Tensor<f32>,
    pub q: Tensor<f32>,
    pub k: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// Tape handles produced by the image tower.
pub struct ImageGraph {
    /// `[B, dim]`, unit rows.
    pub global: Var,
    /// `[B, 1 + patches, dim]`, output of the last block.
    pub tokens: Var,
    pub blocks: Vec<BlockVars>,
}

/// `[32, 32, 3]` images to `[B, patches, patch·patch·3]` rows, patches in
/// raster order and features ordered `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(arch: &ClipArch, images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let (p, g) = (arch.patch, arch.grid());
    let f = arch.patch_features();
    let mut out = Vec::with_capacity(images.len() * g * g * f);
    for img in images {
        check_image(img)?;
        let d = img.data();
        for py in 0..g {
            for px in 0..g {
                for dy in 0..p {
                    let row = (py * p + dy) * IMAGE_SIZE;
                    for dx in 0..p {
                        let at = (row + px * p + dx) * CHANNELS;
                        out.extend(d[at..at + CHANNELS].iter().map(|&v| T::from_f64(v as f64)));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), g * g, f], out)?)
}

pub fn check_image(img: &Tensor<f32>) -> Result<()> {
    if img.shape() != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
        return Err(CoreError::Image(format!(
            "expected shape [{IMAGE_SIZE}, {IMAGE_SIZE}, {CHANNELS}], got {:?}",
            img.shape()
        )));
    }
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::Image("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Output norm, projection and L2 normalization of token rows.
pub fn project<T: Scalar>(t: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
    let h = t.layer_norm(tokens, p["ln_post.g"], p["ln_post.b"], LN_EPS)?;
    let h = t.linear(h, p["proj"], None)?;
    Ok(t.l2_normalize(h)?)
}

pub fn image_graph<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    arch: &ClipArch,
    patches: Var,
    last: LastBlock,
) -> Result<ImageGraph> {
    let b = t.shape(patches)[0];
    let x = t.linear(patches, p["patch.w"], Some(p["patch.b"]))?;
    let zeros = t.constant(Tensor::zeros(&[b, 1, arch.dim]));
    let cls = t.add_broadcast(zeros, p["cls"])?;
    let x = t.concat(cls, x, 1)?;
    let mut x = t.add_broadcast(x, p["pos"])?;
    let mut blocks = Vec::with_capacity(arch.image_depth);
    for i in 0..arch.image_depth {
        let mode = if i + 1 == arch.image_depth {
            last
        } else {
            LastBlock::Standard
        };
        let (y, vars) = block(t, p, &format!("blk{i}"), x, arch.heads, mode)?;
        blocks.push(vars);
        x = y;
    }
    let cls_out = t.slice(x, 1, 0, 1)?;
    let cls_out = t.reshape(cls_out, &[b, arch.dim])?;
    let global = project(t, p, cls_out)?;
    Ok(ImageGraph {
        global,
        tokens: x,
        blocks,
    })
}

/// Text tower over `[B, MAX_TOKENS]` model inputs (flattened ids).
pub fn text_graph<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    arch: &ClipArch,
    ids: &[usize],
) -> Result<Var> {
    let b = ids.len() / MAX_TOKENS;
    let x = t.embedding(p["tok"], ids)?;
    let x = t.reshape(x, &[b, MAX_TOKENS, arch.dim])?;
    let mut x = t.add_broadcast(x, p["pos"])?;
    for i in 0..arch.text_depth {
        x = block(t, p, &format!("blk{i}"), x, arch.heads, LastBlock::Standard)?.0;
    }
    let first = t.slice(x, 1, 0, 1)?;
    let first = t.reshape(first, &[b, arch.dim])?;
    let h = t.layer_norm(first, p["ln_final.g"], p["ln_final.b"], LN_EPS)?;
    let h = t.linear(h, p["proj"], None)?;
    Ok(t.l2_normalize(h)?)
}

/// Flattened model inputs for a batch of captions.
pub fn text_inputs(captions: &[&[u32]]) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(captions.len() * MAX_TOKENS);
    for c in captions {
        ids.extend(model_input(c)?);
    }
    Ok(ids)
}

impl<T: Scalar> ClipModel<T> {
    pub fn new(arch: ClipArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let d = arch.dim;
        let mut image = ParamStore::new(group::IMAGE);
        let mut irng = rng.split("image");
        let f = arch.patch_features();
        image.randn("patch.w", &[f, d], 1.0 / (f as f64).sqrt(), &mut irng);
        image.zeros("patch.b", &[d]);
        image.randn("cls", &[d], 0.02, &mut irng);
        image.randn("pos", &[1 + arch.num_patches(), d], 0.02, &mut irng);
        for i in 0..arch.image_depth {
            init_block(
                &mut image,
                &format!("blk{i}"),
                d,
                arch.mlp_hidden,
                &mut irng,
            );
        }
        image.ones("ln_post.g", &[d]);
        image.zeros("ln_post.b", &[d]);
        image.randn("proj", &[d, d], 1.0 / (d as f64).sqrt(), &mut irng);

        let mut text = ParamStore::new(group::TEXT);
        let mut trng = rng.split("text");
        text.randn("tok", &[vocab_size(), d], 0.02, &mut trng);
        text.randn("pos", &[MAX_TOKENS, d], 0.02, &mut trng);
        for i in 0..arch.text_depth {
            init_block(&mut text, &format!("blk{i}"), d, arch.mlp_hidden, &mut trng);
        }
        text.ones("ln_final.g", &[d]);
        text.zeros("ln_final.b", &[d]);
        text.randn("proj", &[d, d], 1.0 / (d as f64).sqrt(), &mut trng);

        let mut temperature = ParamStore::new(group::TEMPERATURE);
        temperature.insert(
            "log_scale",
            Tensor::full(&[1], T::from_f64((1.0 / INIT_TEMPERATURE).ln())),
        );
        Ok(Self {
            arch,
            image,
            text,
            temperature,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.temperature.get("log_scale").data()[0].as_f64().exp()
    }

    /// Caps `exp(log_scale)` at [`MAX_LOGIT_SCALE`].
    pub fn clamp_temperature(&mut self) {
        let cap = T::from_f64(MAX_LOGIT_SCALE.ln());
        let v = &mut self.temperature.get_mut("log_scale").data_mut()[0];
        if *v > cap {
            *v = cap;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ClipModel<U> {
        ClipModel {
            arch: self.arch,
            image: self.image.cast(),
            text: self.text.cast(),
            temperature: self.temperature.cast(),
        }
    }

    /// Unit-norm global embeddings `[B, dim]`.
    pub fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let chunks: Vec<Tensor<f32>> = images
            .par_chunks(ENCODE_CHUNK)
            .map(|c| {
                let mut t = Tape::<T>::new();
                let p = self.image.bind(&mut t, false)?;
                let x = t.constant(patchify(&self.arch, c)?);
                let g = image_graph(&mut t, &p, &self.arch, x, LastBlock::Standard)?;
                Ok(t.value(g.global).cast())
            })
            .collect::<Result<_>>()?;
        stack_rows(chunks, images.len(), self.arch.dim)
    }

    /// Unit-norm caption embeddings `[N, dim]`.
    pub fn embed_texts(&self, captions: &[&[u32]]) -> Result<Tensor<f32>> {
        let chunks: Vec<Tensor<f32>> = captions
            .par_chunks(ENCODE_CHUNK)
            .map(|c| {
                let mut t = Tape::<T>::new();
                let p = self.text.bind(&mut t, false)?;
                let e = text_graph(&mut t, &p, &self.arch, &text_inputs(c)?)?;
                Ok(t.value(e).cast())
            })
            .collect::<Result<_>>()?;
        stack_rows(chunks, captions.len(), self.arch.dim)
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let e = self.embed_texts(&[tokens])?;
        Ok(e.reshaped(&[self.arch.dim])?)
    }

    pub fn encode_image(&self, image: &Tensor<f32>) -> Result<EncodeOutput> {
        let mut t = Tape::<T>::new();
        let p = self.image.bind(&mut t, false)?;
        let x = t.constant(patchify(&self.arch, &[image])?);
        let g = image_graph(&mut t, &p, &self.arch, x, LastBlock::Standard)?;
        let (n, d) = (self.arch.num_patches(), self.arch.dim);
        let tokens: Tensor<f32> = t.value(g.tokens).cast();
        let patch_tokens = Tensor::from_vec(&[n, d], tokens.data()[d..].to_vec())?;
        let internals = g
            .blocks
            .iter()
            .map(|b| AttentionInternals {
                input: t.value(b.input).cast(),
                q: t.value(b.q).cast(),
                k: t.value(b.k).cast(),
                v: t.value(b.v).cast(),
            })
            .collect();
        Ok(EncodeOutput {
            global: t.value(g.global).cast::<f32>().reshaped(&[d])?,
            patch_tokens,
            attention_internals: internals,
        })
    }

    /// Unit-norm patch features in the joint space, `[B, patches, dim]`, with
    /// the last image block evaluated as `last`.
    pub fn dense_features(&self, images: &[&Tensor<f32>], last: LastBlock) -> Result<Tensor<f32>> {
        let (n, d) = (self.arch.num_patches(), self.arch.dim);
        let chunks: Vec<Tensor<f32>> = images
            .par_chunks(ENCODE_CHUNK)
            .map(|c| {
                let mut t = Tape::<T>::new();
                let p = self.image.bind(&mut t, false)?;
                let x = t.constant(patchify(&self.arch, c)?);
                let g = image_graph(&mut t, &p, &self.arch, x, last)?;
                let patches = t.slice(g.tokens, 1, 1, n)?;
                let f = project(&mut t, &p, patches)?;
                Ok(t.value(f).cast())
            })
            .collect::<Result<_>>()?;
        stack_rows(chunks, images.len(), n * d)?
            .reshaped(&[images.len(), n, d])
            .map_err(Into::into)
    }
}

fn stack_rows(chunks: Vec<Tensor<f32>>, rows: usize, width: usize) -> Result<Tensor<f32>> {
    if rows == 0 {
        return Err(CoreError::Eval("nothing to encode".into()));
    }
    let data: Vec<f32> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::from_vec(&[rows, width], data)?)
}

impl ClipModel<f32> {
    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.extra.insert(
            "arch".into(),
            serde_json::to_string(&self.arch).expect("serializable"),
        );
        let mut ck = Checkpoint::new(CLIP_KIND, metadata);
        for (prefix, store) in [
            ("image", &self.image),
            ("text", &self.text),
            ("temperature", &self.temperature),
        ] {
            for (n, t) in store.iter() {
                ck.push(format!("{prefix}.{n}"), t.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CLIP_KIND {
            return Err(CoreError::KindMismatch {
                expected: CLIP_KIND.into(),
                found: ck.kind.clone(),
            });
        }
        let arch: ClipArch = ck
            .metadata
            .extra
            .get("arch")
            .ok_or_else(|| CoreError::Checkpoint("clip checkpoint lacks architecture".into()))
            .and_then(|s| {
                serde_json::from_str(s).map_err(|e| CoreError::Checkpoint(e.to_string()))
            })?;
        let template = ClipModel::<f32>::new(arch, &mut RngStream::new(0))?;
        Ok(Self {
            arch,
            image: ParamStore::load_like(&template.image, ck.take_prefixed("image."))?,
            text: ParamStore::load_like(&template.text, ck.take_prefixed("text."))?,
            temperature: ParamStore::load_like(
                &template.temperature,
                ck.take_prefixed("temperature."),
            )?,
        })
    }
}
