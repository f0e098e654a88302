use serde::{Deserialize, Serialize};
use un2clip_autograd::{AdamWConfig, AdamWState, RngStream, Tape, Tensor, Var};

use super::denoiser::{denoiser_graph, to_model_space, Denoiser, DenoiserArch};
use super::schedule::{mix, DiffusionSchedule, ScheduleConfig};
use crate::clip::{image_graph, patchify, ClipModel, LastBlock};
use crate::corpus::generate::Corpus;
use crate::corpus::render::Split;
use crate::error::{CoreError, Result};
use crate::params::{group, Binding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub arch: DenoiserArch,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            arch: DenoiserArch::default(),
            batch_size: 32,
            epochs: 20,
            learning_rate: 5e-3,
            weight_decay: 0.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.build()?;
        if self.batch_size == 0 {
            return Err(CoreError::Config(
                "diffusion batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Noisy inputs for one batch in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub x_t: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub t: Vec<usize>,
}

/// Uniform timesteps in `1..=T` and standard-normal noise per element.
pub fn noise_batch(
    x0: &Tensor<f32>,
    schedule: &DiffusionSchedule,
    rng: &mut RngStream,
) -> NoisedBatch {
    let b = x0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| 1 + rng.below(schedule.steps())).collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = apply_noise(x0, &eps, &t, schedule);
    NoisedBatch { x_t, eps, t }
}

/// Per-item closed-form diffusion of a `[B, ...]` batch.
pub fn apply_noise(
    x0: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: &[usize],
    schedule: &DiffusionSchedule,
) -> Tensor<f32> {
    let per = x0.len() / t.len();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        let span = i * per..(i + 1) * per;
        let a = Tensor::from_vec(&[per], x0.data()[span.clone()].to_vec()).expect("slice");
        let e = Tensor::from_vec(&[per], eps.data()[span].to_vec()).expect("slice");
        out.extend(mix(&a, &e, schedule.alpha_bar[ti - 1]).into_data());
    }
    Tensor::from_vec(x0.shape(), out).expect("same shape")
}

/// `mean((ε − ε_G(x_t, t, emb))²)` on a tape.
pub fn diffusion_loss_graph(
    tape: &mut Tape<f32>,
    g: &Denoiser,
    g_vars: &crate::params::Bound,
    batch: &NoisedBatch,
    emb: Var,
) -> Result<Var> {
    let x = tape.constant(batch.x_t.clone());
    let eps = tape.constant(batch.eps.clone());
    let pred = denoiser_graph(tape, g_vars, &g.arch, x, &batch.t, emb)?;
    Ok(tape.mse(pred, eps)?)
}

/// One decoder update on raw images: embeds them with the frozen encoder,
/// noises them and regresses the noise.
pub fn unclip_train_step(
    g: &mut Denoiser,
    encoder: &ClipModel,
    images: &[&Tensor<f32>],
    schedule: &DiffusionSchedule,
    opt: &mut AdamWState<f32>,
    rng: &mut RngStream,
) -> Result<f64> {
    unclip_train_step_with(g, encoder, images, schedule, opt, rng, Binding::Frozen)
}

pub fn unclip_train_step_with(
    g: &mut Denoiser,
    encoder: &ClipModel,
    images: &[&Tensor<f32>],
    schedule: &DiffusionSchedule,
    opt: &mut AdamWState<f32>,
    rng: &mut RngStream,
    binding: Binding,
) -> Result<f64> {
    let x0 = to_model_space(images)?;
    let batch = noise_batch(&x0, schedule, rng);
    let mut tape = Tape::<f32>::new();
    let ev = encoder.image.bind(&mut tape, binding.trainable())?;
    let patches = tape.constant(patchify(&encoder.arch, images)?);
    let emb = image_graph(&mut tape, &ev, &encoder.arch, patches, LastBlock::Standard)?.global;
    let gv = g.params.bind(&mut tape, true)?;
    let loss = diffusion_loss_graph(&mut tape, g, &gv, &batch, emb)?;
    finish_step(tape, loss, g, opt, "train-unclip", opt_step(opt))
}

fn opt_step(opt: &AdamWState<f32>) -> usize {
    opt.step_count() as usize
}

fn finish_step(
    tape: Tape<f32>,
    loss: Var,
    g: &mut Denoiser,
    opt: &mut AdamWState<f32>,
    stage: &'static str,
    step: usize,
) -> Result<f64> {
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(CoreError::Diverged {
            stage,
            step,
            loss: value,
        });
    }
    let grads = tape.backward(loss)?;
    if grads.touches_group(group::IMAGE) {
        return Err(CoreError::InvariantViolation(
            "gradient reached the image encoder during decoder training".into(),
        ));
    }
    g.params.apply(opt, &grads)?;
    Ok(value)
}

/// One decoder update on precomputed (fixed) embeddings.
pub fn unclip_step_on_embeddings(
    g: &mut Denoiser,
    x0: &Tensor<f32>,
    emb: &Tensor<f32>,
    schedule: &DiffusionSchedule,
    opt: &mut AdamWState<f32>,
    rng: &mut RngStream,
) -> Result<f64> {
    let batch = noise_batch(x0, schedule, rng);
    let mut tape = Tape::<f32>::new();
    let e = tape.constant(emb.clone());
    let gv = g.params.bind(&mut tape, true)?;
    let loss = diffusion_loss_graph(&mut tape, g, &gv, &batch, e)?;
    let step = opt_step(opt);
    finish_step(tape, loss, g, opt, "train-unclip", step)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnclipLog {
    pub losses: Vec<f64>,
}

/// Cosine decay from `base` to zero over training progress `frac` in [0, 1].
pub fn cosine_rate(base: f64, frac: f64) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos())
}

/// Trains the decoder on the training split, conditioned on the frozen
/// encoder's embeddings. The learning rate follows a cosine decay so the
/// decoder ends close to a stationary point; finetuning against a decoder
/// that still has slack in its biases mostly shifts every embedding the same
/// way.
pub fn train_unclip(
    corpus: &Corpus,
    encoder: &ClipModel,
    config: &DiffusionConfig,
    seed: u64,
) -> Result<(Denoiser, UnclipLog)> {
    config.validate()?;
    if config.arch.embed_dim != encoder.arch.dim {
        return Err(CoreError::Config(format!(
            "decoder expects {}-dim embeddings, encoder produces {}",
            config.arch.embed_dim, encoder.arch.dim
        )));
    }
    let schedule = config.schedule.build()?;
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(CoreError::Config(
            "decoder training needs training scenes".into(),
        ));
    }
    let images: Vec<&Tensor<f32>> = train.iter().map(|s| &s.image).collect();
    let emb = encoder.embed_images(&images)?;
    let root = RngStream::new(seed).split("unclip");
    let mut g = Denoiser::new(config.arch, &mut root.split("init"))?;
    let mut opt = AdamWState::new(config.adamw());
    let mut log = UnclipLog::default();
    let d = encoder.arch.dim;
    let mut step = 0u64;
    let total = (config.epochs * train.len().div_ceil(config.batch_size)) as f64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split("batches")
            .split_index(epoch as u64)
            .shuffle(&mut order);
        for idx in order.chunks(config.batch_size) {
            opt.hyper.learning_rate = cosine_rate(config.learning_rate, step as f64 / total);
            let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| images[i]).collect();
            let x0 = to_model_space(&imgs)?;
            let e: Vec<f32> = idx.iter().flat_map(|&i| emb.row(i).to_vec()).collect();
            let e = Tensor::from_vec(&[idx.len(), d], e)?;
            let mut rng = root.split("noise").split_index(step);
            log.losses.push(unclip_step_on_embeddings(
                &mut g, &x0, &e, &schedule, &mut opt, &mut rng,
            )?);
            step += 1;
        }
    }
    Ok((g, log))
}
