use std::fmt::Write as _;

use un2clip_autograd::{RngStream, Tensor};

use super::bank::{diagnostic_on_embeddings, sorted_scenes, NoiseBank};
use super::drift::{alignment_drift, DriftReport};
use super::run::{FinetuneConfig, FinetuneMode, FinetuneRun};
use crate::clip::ClipModel;
use crate::corpus::generate::Corpus;
use crate::corpus::render::{ShapeScene, Split};
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;

/// State after `epoch` passes over the training images.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: FinetuneMode,
    pub diagnostic_loss: f64,
    pub drift: DriftReport,
    /// Mean training loss of the epoch (absent for epoch 0).
    pub train_loss: Option<f64>,
    pub encoder_digest: String,
    pub generator_digest: String,
    pub encoder: ClipModel,
    pub projector: Option<ParamStore>,
}

/// Images the diagnostic is computed on: the first `limit` test scenes by
/// id (all when `limit` is 0).
pub fn diagnostic_set(corpus: &Corpus, limit: usize) -> Vec<&ShapeScene> {
    let mut v = sorted_scenes(&corpus.split(Split::Test));
    if limit > 0 {
        v.truncate(limit);
    }
    v
}

/// Seed of the `i`-th independent diagnostic bank derived from a run seed.
pub fn bank_seed(seed: u64, i: usize) -> u64 {
    RngStream::new(seed)
        .split("bank")
        .split_index(i as u64)
        .next_seed()
}

/// Diagnostic loss of an encoder (optionally behind a projector) under
/// decoder `g`.
pub fn diagnostic_loss(
    encoder: &ClipModel,
    projector: Option<&ParamStore>,
    g: &Denoiser,
    test_set: &[&ShapeScene],
    bank: &NoiseBank,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let scenes = bank.check(test_set, schedule)?;
    let images: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
    let mut emb = encoder.embed_images(&images)?;
    if let Some(p) = projector {
        emb = super::run::project_embeddings(p, &emb)?;
    }
    diagnostic_on_embeddings(g, &scenes, &emb, bank, schedule)
}

/// Finetunes a copy of `e_init` for `epochs` passes over the training
/// images, recording the diagnostic (first bank) and drift after every
/// epoch. Record 0 describes the starting point.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    e_init: &ClipModel,
    g: &Denoiser,
    corpus: &Corpus,
    mode: FinetuneMode,
    epochs: usize,
    schedule: &DiffusionSchedule,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let train = corpus.split(Split::Train);
    if train.is_empty() && epochs > 0 {
        return Err(CoreError::Config("finetuning needs training images".into()));
    }
    let diag = diagnostic_set(corpus, config.diagnostic_images);
    let drift_set = sorted_scenes(&corpus.split(Split::Test));
    let bank = NoiseBank::new(&diag, schedule, bank_seed(seed, 0))?;
    let root = RngStream::new(seed).split("finetune").split(mode.name());
    let mut run = FinetuneRun::new(
        mode,
        e_init.clone(),
        g.clone(),
        config,
        &mut root.split("projector"),
    );
    let record =
        |run: &FinetuneRun, epoch: usize, train_loss: Option<f64>| -> Result<EpochRecord> {
            Ok(EpochRecord {
                epoch,
                mode,
                diagnostic_loss: diagnostic_loss(
                    &run.clip,
                    run.projector.as_ref(),
                    &run.generator,
                    &diag,
                    &bank,
                    schedule,
                )?,
                drift: alignment_drift(&run.clip, e_init, &drift_set)?,
                train_loss,
                encoder_digest: run.clip.image.digest(),
                generator_digest: run.generator.params.digest(),
                encoder: run.clip.clone(),
                projector: run.projector.clone(),
            })
        };
    let mut records = vec![record(&run, 0, None)?];
    let mut step = 0u64;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split("batches")
            .split_index(epoch as u64)
            .shuffle(&mut order);
        let mut total = 0.0;
        let mut n = 0usize;
        for idx in order.chunks(config.batch_size) {
            let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train[i].image).collect();
            let mut rng = root.split("noise").split_index(step);
            total += run.step(&imgs, schedule, &mut rng)?;
            n += 1;
            step += 1;
        }
        records.push(record(&run, epoch, Some(total / n as f64))?);
    }
    Ok(records)
}

pub const METRICS_HEADER: &str = "epoch,mode,diagnostic_loss,drift,checkpoint";

/// Per-epoch metrics CSV; `paths[i]` is the checkpoint written for
/// `records[i]`.
pub fn metrics_csv(records: &[EpochRecord], paths: &[String]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (r, p) in records
        .iter()
        .zip(paths.iter().map(Some).chain(std::iter::repeat(None)))
    {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            r.epoch,
            r.mode,
            r.diagnostic_loss,
            r.drift.delta,
            p.map(String::as_str).unwrap_or("")
        );
    }
    out
}
