use serde::{Deserialize, Serialize};
use un2clip_autograd::{AdamWConfig, AdamWState, RngStream, Tape, Tensor};

use crate::clip::{image_graph, patchify, ClipModel, LastBlock};
use crate::diffusion::{
    diffusion_loss_graph, noise_batch, to_model_space, Denoiser, DiffusionSchedule,
};
use crate::error::{CoreError, Result};
use crate::params::{group, Binding, ParamStore};

/// Which parameters the finetuning objective moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder only; decoder frozen.
    Default,
    /// Encoder plus a randomly initialized linear map in front of the frozen
    /// decoder.
    ProjectorRandom,
    /// As above with the map initialized to the identity.
    ProjectorIdentity,
    /// Encoder and decoder both trained.
    UpdateG,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 4] = [
        FinetuneMode::Default,
        FinetuneMode::ProjectorRandom,
        FinetuneMode::ProjectorIdentity,
        FinetuneMode::UpdateG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Default => "default",
            FinetuneMode::ProjectorRandom => "projector_random",
            FinetuneMode::ProjectorIdentity => "projector_identity",
            FinetuneMode::UpdateG => "update_g",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown finetune mode {s:?}")))
    }

    pub fn has_projector(self) -> bool {
        matches!(
            self,
            FinetuneMode::ProjectorRandom | FinetuneMode::ProjectorIdentity
        )
    }

    pub fn updates_generator(self) -> bool {
        self == FinetuneMode::UpdateG
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `dim × dim` linear map with bias, inserted between encoder and decoder.
pub fn make_projector(mode: FinetuneMode, dim: usize, rng: &mut RngStream) -> Option<ParamStore> {
    let mut p = ParamStore::new(group::PROJECTOR);
    match mode {
        FinetuneMode::ProjectorRandom => {
            p.randn("w", &[dim, dim], 1.0 / (dim as f64).sqrt(), rng);
        }
        FinetuneMode::ProjectorIdentity => {
            let mut w = Tensor::zeros(&[dim, dim]);
            for i in 0..dim {
                w.data_mut()[i * dim + i] = 1.0;
            }
            p.insert("w", w);
        }
        _ => return None,
    }
    p.zeros("b", &[dim]);
    Some(p)
}

/// Applies a projector to `[N, dim]` embeddings.
pub fn project_embeddings(p: &ParamStore, emb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut t = Tape::<f32>::new();
    let v = p.bind(&mut t, false)?;
    let e = t.constant(emb.clone());
    let y = t.linear(e, v["w"], Some(v["b"]))?;
    Ok(t.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Decoder learning rate in `update_g` mode.
    pub generator_learning_rate: f64,
    /// Test images (lowest scene ids first) used by the diagnostic; 0 = all.
    pub diagnostic_images: usize,
    /// Independent noise banks for the ordering check.
    pub banks: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 3,
            learning_rate: 4e-5,
            weight_decay: 0.0,
            generator_learning_rate: 1e-4,
            diagnostic_images: 100,
            banks: 3,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.banks == 0 {
            return Err(CoreError::Config(
                "finetune batch_size and banks must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Mutable state of one finetuning run.
#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub mode: FinetuneMode,
    pub clip: ClipModel,
    pub projector: Option<ParamStore>,
    pub generator: Denoiser,
    opt_encoder: AdamWState<f32>,
    opt_generator: AdamWState<f32>,
}

impl FinetuneRun {
    pub fn new(
        mode: FinetuneMode,
        clip: ClipModel,
        generator: Denoiser,
        config: &FinetuneConfig,
        rng: &mut RngStream,
    ) -> Self {
        let projector = make_projector(mode, clip.arch.dim, rng);
        Self {
            mode,
            clip,
            projector,
            generator,
            opt_encoder: AdamWState::new(config.adamw(config.learning_rate)),
            opt_generator: AdamWState::new(config.adamw(config.generator_learning_rate)),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt_encoder.step_count()
    }

    /// What the decoder is conditioned on: `E(x)` or `P(E(x))`.
    pub fn conditioning(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let e = self.clip.embed_images(images)?;
        match &self.projector {
            Some(p) => project_embeddings(p, &e),
            None => Ok(e),
        }
    }

    /// Loss on a batch without updating anything.
    pub fn loss(
        &self,
        images: &[&Tensor<f32>],
        schedule: &DiffusionSchedule,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let (tape, loss) = self.graph(images, schedule, rng, Binding::Frozen, false)?;
        Ok(tape.value(loss).item() as f64)
    }

    fn graph(
        &self,
        images: &[&Tensor<f32>],
        schedule: &DiffusionSchedule,
        rng: &mut RngStream,
        g_binding: Binding,
        trainable: bool,
    ) -> Result<(Tape<f32>, un2clip_autograd::Var)> {
        let x0 = to_model_space(images)?;
        let batch = noise_batch(&x0, schedule, rng);
        let mut tape = Tape::<f32>::new();
        let ev = self.clip.image.bind(&mut tape, trainable)?;
        let x = tape.constant(patchify(&self.clip.arch, images)?);
        let mut emb = image_graph(&mut tape, &ev, &self.clip.arch, x, LastBlock::Standard)?.global;
        if let Some(p) = &self.projector {
            let pv = p.bind(&mut tape, trainable)?;
            emb = tape.linear(emb, pv["w"], Some(pv["b"]))?;
        }
        let g_trainable = trainable && (self.mode.updates_generator() || g_binding.trainable());
        let gv = self.generator.params.bind(&mut tape, g_trainable)?;
        let loss = diffusion_loss_graph(&mut tape, &self.generator, &gv, &batch, emb)?;
        Ok((tape, loss))
    }

    /// One finetuning update; see [`un2clip_step`].
    pub fn step(
        &mut self,
        images: &[&Tensor<f32>],
        schedule: &DiffusionSchedule,
        rng: &mut RngStream,
    ) -> Result<f64> {
        self.step_with(images, schedule, rng, Binding::Frozen)
    }

    pub fn step_with(
        &mut self,
        images: &[&Tensor<f32>],
        schedule: &DiffusionSchedule,
        rng: &mut RngStream,
        g_binding: Binding,
    ) -> Result<f64> {
        let (tape, loss) = self.graph(images, schedule, rng, g_binding, true)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged {
                stage: "finetune",
                step: self.steps_taken() as usize,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        if !self.mode.updates_generator() && grads.touches_group(group::DENOISER) {
            return Err(CoreError::InvariantViolation(format!(
                "gradient reached the frozen decoder in {} mode",
                self.mode
            )));
        }
        let refs = self
            .clip
            .image
            .param_refs()
            .chain(self.projector.iter_mut().flat_map(|p| p.param_refs()));
        self.opt_encoder.step(refs, &grads)?;
        if self.mode.updates_generator() {
            self.generator
                .params
                .apply(&mut self.opt_generator, &grads)?;
        }
        Ok(value)
    }
}

/// One step of decoder-inversion finetuning: noise the batch, condition the
/// decoder on the (projected) encoder embedding, regress the noise, update
/// the parameters the mode allows.
pub fn un2clip_step(
    run: &mut FinetuneRun,
    images: &[&Tensor<f32>],
    schedule: &DiffusionSchedule,
    rng: &mut RngStream,
) -> Result<f64> {
    run.step(images, schedule, rng)
}
