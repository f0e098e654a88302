use serde::{Deserialize, Serialize};
use un2clip_autograd::{AdamWConfig, AdamWState, RngStream, Tape, Tensor};

use super::loss::infonce_graph;
use super::model::{image_graph, patchify, text_graph, text_inputs, ClipArch, ClipModel};
use super::transformer::LastBlock;
use crate::corpus::attrs::{AttributeRecord, PatternFamily, ShapeClass};
use crate::corpus::caption::CaptionSpec;
use crate::corpus::generate::Corpus;
use crate::corpus::render::{ShapeScene, Split};
use crate::error::{CoreError, Result};
use crate::eval::recall_at_k;

/// Probability that a training caption mentions each optional family. The
/// scene's own pattern family is always mentioned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentionRates {
    pub color: f64,
    pub count: f64,
    pub position: f64,
    pub orientation: f64,
}

impl Default for MentionRates {
    fn default() -> Self {
        Self {
            color: 0.5,
            count: 0.3,
            position: 0.3,
            orientation: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub arch: ClipArch,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Validation retrieval is measured every this many steps and at the end.
    pub eval_every: usize,
    pub mention: MentionRates,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            arch: ClipArch::default(),
            batch_size: 64,
            epochs: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            eval_every: 100,
            mention: MentionRates::default(),
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(CoreError::Config(
                "clip batch_size must be at least 2".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(CoreError::Config("clip eval_every must be positive".into()));
        }
        let m = self.mention;
        if [m.color, m.count, m.position, m.orientation]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(CoreError::Config("mention rates must lie in [0, 1]".into()));
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

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipTrainLog {
    pub losses: Vec<f64>,
    /// `(step, recall@1)` on validation batches.
    pub val_recall: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_recall: f64,
}

/// A partial caption: the noun always, the scene's pattern family always,
/// every other family with its mention rate.
pub fn training_caption(
    a: &AttributeRecord,
    rates: &MentionRates,
    rng: &mut RngStream,
) -> Vec<u32> {
    let mut keep = |fam: PatternFamily, p: f64| a.pattern_family == fam || rng.uniform() < p;
    let color = keep(PatternFamily::Color, rates.color).then_some(a.color);
    let count = keep(PatternFamily::Count, rates.count).then_some(a.count);
    let cell = keep(PatternFamily::Position, rates.position).then_some(a.cell);
    let orientation = if a.shape_class == ShapeClass::Triangle {
        keep(PatternFamily::Orientation, rates.orientation)
            .then_some(a.orientation)
            .flatten()
    } else {
        None
    };
    let spec = CaptionSpec {
        shape: a.shape_class,
        count,
        color,
        orientation,
        cell,
    };
    crate::corpus::caption::tokenize(&spec.render()).expect("grammar captions are in vocabulary")
}

/// Mean in-batch image→text recall@1 over consecutive validation batches.
pub fn validation_recall(
    model: &ClipModel,
    scenes: &[&ShapeScene],
    batch: usize,
) -> Result<Option<f64>> {
    let mut hits = 0.0;
    let mut n = 0usize;
    for chunk in scenes.chunks(batch).filter(|c| c.len() >= 2) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let caps: Vec<&[u32]> = chunk.iter().map(|s| s.caption.as_slice()).collect();
        let ie = model.embed_images(&imgs)?;
        let te = model.embed_texts(&caps)?;
        hits += recall_at_k(&ie, &te, 1)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok((n > 0).then(|| hits / n as f64))
}

/// Trains from scratch; returns the parameters with the best validation
/// retrieval@1 (the final ones when there is no validation split).
pub fn train_clip(
    corpus: &Corpus,
    config: &ClipConfig,
    seed: u64,
) -> Result<(ClipModel, ClipTrainLog)> {
    config.validate()?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    if train.len() < 2 {
        return Err(CoreError::Config(
            "clip training needs at least 2 training scenes".into(),
        ));
    }
    let root = RngStream::new(seed).split("clip");
    let mut model = ClipModel::<f32>::new(config.arch, &mut root.split("init"))?;
    let mut opt = AdamWState::new(config.adamw());
    let mut temp_opt = AdamWState::new(AdamWConfig {
        weight_decay: 0.0,
        ..config.adamw()
    });
    let mut log = ClipTrainLog::default();
    let mut best: Option<ClipModel> = None;
    let mut step = 0usize;
    let evaluate = |model: &ClipModel,
                    step: usize,
                    log: &mut ClipTrainLog,
                    best: &mut Option<ClipModel>|
     -> Result<()> {
        if let Some(r) = validation_recall(model, &val, config.batch_size)? {
            log.val_recall.push((step, r));
            if best.is_none() || r > log.best_recall {
                log.best_recall = r;
                log.best_step = step;
                *best = Some(model.clone());
            }
        }
        Ok(())
    };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split("batches")
            .split_index(epoch as u64)
            .shuffle(&mut order);
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let mut crng = root.split("captions").split_index(step as u64);
            let scenes: Vec<&ShapeScene> = idx.iter().map(|&i| train[i]).collect();
            let caps: Vec<Vec<u32>> = scenes
                .iter()
                .map(|s| training_caption(&s.attrs, &config.mention, &mut crng))
                .collect();
            let loss = clip_step(&mut model, &scenes, &caps, &mut opt, &mut temp_opt)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    stage: "train-clip",
                    step,
                    loss,
                });
            }
            log.losses.push(loss);
            step += 1;
            if step.is_multiple_of(config.eval_every) {
                evaluate(&model, step, &mut log, &mut best)?;
            }
        }
    }
    if !step.is_multiple_of(config.eval_every) || step == 0 {
        evaluate(&model, step, &mut log, &mut best)?;
    }
    Ok((best.unwrap_or(model), log))
}

fn clip_step(
    model: &mut ClipModel,
    scenes: &[&ShapeScene],
    captions: &[Vec<u32>],
    opt: &mut AdamWState<f32>,
    temp_opt: &mut AdamWState<f32>,
) -> Result<f64> {
    let mut t = Tape::<f32>::new();
    let ip = model.image.bind(&mut t, true)?;
    let tp = model.text.bind(&mut t, true)?;
    let sp = model.temperature.bind(&mut t, true)?;
    let imgs: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
    let x = t.constant(patchify(&model.arch, &imgs)?);
    let g = image_graph(&mut t, &ip, &model.arch, x, LastBlock::Standard)?;
    let caps: Vec<&[u32]> = captions.iter().map(Vec::as_slice).collect();
    let txt = text_graph(&mut t, &tp, &model.arch, &text_inputs(&caps)?)?;
    let scale = t.exp(sp["log_scale"])?;
    let loss = infonce_graph(&mut t, g.global, txt, scale)?;
    let value = t.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = t.backward(loss)?;
    opt.step(
        model.image.param_refs().chain(model.text.param_refs()),
        &grads,
    )?;
    model.temperature.apply(temp_opt, &grads)?;
    model.clamp_temperature();
    Ok(value)
}
