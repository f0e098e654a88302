//! Every stage under one seed, writing into one directory.

use std::path::{Path, PathBuf};

use anyhow::Result;
use un2clip_autograd::Tensor;
use un2clip_core::clip::{train_clip, ClipModel};
use un2clip_core::corpus::{generate_corpus, mine_blind_pairs, ShapeScene, Split};
use un2clip_core::diffusion::{sample_batch, train_unclip, Denoiser, SampleMode};
use un2clip_core::eval::{
    dense_segment, render_report, shape_prompts, DenseVariant, MetricKind, MetricRecord,
};
use un2clip_core::finetune::{
    bank_seed, diagnostic_loss, diagnostic_set, finetune, metrics_csv, sorted_scenes, EpochRecord,
    NoiseBank,
};
use un2clip_core::io::config::RunConfig;
use un2clip_core::io::ppm::{encode_ppm, overlay, sheet};
use un2clip_core::io::write_atomic;

use crate::artifacts::{projector_checkpoint, resolve, save, write_text, MetricFile, Provenance};
use crate::evaluate::Evaluator;

/// Scenes shown in the sample and overlay sheets.
const SHEET_SCENES: usize = 4;

/// Saves one encoder checkpoint per record (plus the projector where there
/// is one) under `base/rel/<mode>/` and returns the paths as seen from
/// `base`.
pub fn save_epochs(
    records: &[EpochRecord],
    base: &Path,
    rel: &Path,
    prov: &Provenance,
) -> Result<Vec<String>> {
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let name = rel.join(r.mode.name()).join(format!("epoch{}.ck", r.epoch));
        let mut meta = prov.metadata(r.epoch as u64);
        meta.extra.insert("mode".into(), r.mode.name().into());
        save(&r.encoder.to_checkpoint(meta.clone()), &base.join(&name))?;
        if let Some(p) = &r.projector {
            let pname = rel
                .join(r.mode.name())
                .join(format!("epoch{}.projector.ck", r.epoch));
            save(&projector_checkpoint(p, meta), &base.join(pname))?;
        }
        paths.push(name.display().to_string());
    }
    Ok(paths)
}

/// Checkpoints plus the per-epoch CSV for a standalone finetune; returns the
/// CSV text.
pub fn write_finetune(
    records: &[EpochRecord],
    out_dir: &Path,
    prov: &Provenance,
) -> Result<String> {
    let paths = save_epochs(records, Path::new(""), out_dir, prov)?;
    let csv = prov.csv_comment() + &metrics_csv(records, &paths);
    write_text(&out_dir.join("metrics.csv"), &csv)?;
    Ok(csv)
}

fn ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    Ok(write_atomic(&resolve(path), &encode_ppm(image)?)?)
}

fn mask_of(labels: &[u8], palette: &[[u8; 3]], image: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(overlay(image, labels, palette, 0.6)?)
}

/// Encode–decode sheet: each row is an input scene followed by its sample.
fn sample_sheet(
    clip: &ClipModel,
    g: &Denoiser,
    scenes: &[&ShapeScene],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    let schedule = cfg.diffusion.schedule.build()?;
    let images: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
    let emb = clip.embed_images(&images)?;
    let out = sample_batch(
        g,
        &emb,
        &vec![seed; scenes.len()],
        &schedule,
        SampleMode::Ancestral,
    )?;
    Ok(sheet(
        &images
            .iter()
            .zip(out)
            .map(|(a, b)| vec![(*a).clone(), b])
            .collect::<Vec<_>>(),
    )?)
}

/// Segmentation sheet: image, ground truth, then one prediction per model.
fn overlay_sheet(
    models: &[(String, &ClipModel)],
    scenes: &[&ShapeScene],
    cfg: &RunConfig,
) -> Result<Tensor<f32>> {
    let prompts = shape_prompts();
    let palette = &cfg.eval.palette;
    let mut rows = Vec::new();
    for s in scenes {
        let mut row = vec![s.image.clone(), mask_of(&s.mask, palette, &s.image)?];
        for (_, m) in models {
            let p = dense_segment(
                m,
                &s.image,
                &prompts,
                DenseVariant::Vanilla,
                Some(cfg.eval.background_threshold),
            )?;
            row.push(mask_of(&p.labels, palette, &s.image)?);
        }
        rows.push(row);
    }
    Ok(sheet(&rows)?)
}

pub fn run(cfg: &RunConfig, prov: &Provenance, dir: &Path) -> Result<()> {
    let seed = prov.seed;
    let at = |name: &str| -> PathBuf { dir.join(name) };
    let log = |msg: &str| eprintln!("[pipeline] {msg}");

    log("generating corpus");
    let corpus = generate_corpus(&cfg.corpus, seed)?;
    corpus.write(&resolve(&at("corpus.bin")))?;

    log("contrastive pretraining");
    let (clip, _) = train_clip(&corpus, &cfg.clip, seed)?;
    save(
        &clip.to_checkpoint(prov.metadata(cfg.clip.epochs as u64)),
        &at("clip.ck"),
    )?;

    log("decoder training");
    let (g, _) = train_unclip(&corpus, &clip, &cfg.diffusion, seed)?;
    save(
        &g.to_checkpoint(prov.metadata(cfg.diffusion.epochs as u64)),
        &at("unclip.ck"),
    )?;

    let schedule = cfg.diffusion.schedule.build()?;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut paths = Vec::new();
    for &mode in &cfg.pipeline.modes {
        log(&format!("finetuning ({})", mode.name()));
        let r = finetune(
            &clip,
            &g,
            &corpus,
            mode,
            cfg.finetune.epochs,
            &schedule,
            &cfg.finetune,
            seed,
        )?;
        paths.extend(save_epochs(&r, dir, Path::new("finetune"), prov)?);
        records.extend(r);
    }
    write_text(
        &at("metrics.csv"),
        &(prov.csv_comment() + &metrics_csv(&records, &paths)),
    )?;

    log("evaluating");
    let finals: Vec<&EpochRecord> = cfg
        .pipeline
        .modes
        .iter()
        .filter_map(|m| records.iter().rfind(|r| r.mode == *m))
        .collect();
    let mut models: Vec<(String, &ClipModel)> = vec![("original".into(), &clip)];
    models.extend(
        finals
            .iter()
            .map(|r| (r.mode.name().to_string(), &r.encoder)),
    );

    let ev = Evaluator::new(&corpus, &cfg.eval);
    let diag = diagnostic_set(&corpus, cfg.finetune.diagnostic_images);
    let banks = (0..cfg.finetune.banks)
        .map(|i| NoiseBank::new(&diag, &schedule, bank_seed(seed, i)))
        .collect::<un2clip_core::Result<Vec<_>>>()?;
    let mined = mine_blind_pairs(
        &corpus,
        &clip,
        cfg.eval.mining_threshold,
        cfg.eval.pairs_per_family,
    )?;
    for w in &mined.warnings {
        log(&format!(
            "warning: only {} of {} {} pairs found",
            w.found, w.requested, w.family
        ));
    }

    let mut metrics: Vec<MetricRecord> = Vec::new();
    for (i, (name, model)) in models.iter().enumerate() {
        // The finetuned rows are scored with the decoder and projector they
        // were trained against.
        let (proj, gen) = match i.checked_sub(1).map(|k| finals[k]) {
            Some(r) => (
                r.projector.as_ref(),
                if r.mode.updates_generator() {
                    None
                } else {
                    Some(&g)
                },
            ),
            None => (None, Some(&g)),
        };
        if let Some(gen) = gen {
            for (b, bank) in banks.iter().enumerate() {
                let l = diagnostic_loss(model, proj, gen, &diag, bank, &schedule)?;
                let metric = if b == 0 {
                    "diffusion_loss".to_string()
                } else {
                    format!("diffusion_loss_bank{b}")
                };
                metrics.push(ev.record(name, &metric, MetricKind::Loss, l));
            }
        } else if let Some(r) = finals.get(i - 1) {
            metrics.push(ev.record(name, "diffusion_loss", MetricKind::Loss, r.diagnostic_loss));
        }
        metrics.extend(ev.blind(name, model, &mined.pairs)?);
        metrics.extend(ev.dense(name, model)?);
        metrics.extend(ev.zeroshot(name, model)?);
    }
    MetricFile {
        provenance: prov.clone(),
        corpus: ev.digest.clone(),
        records: metrics.clone(),
    }
    .write(&at("metrics.json"))?;
    let report = render_report(&metrics)?;
    write_text(&at("report.txt"), &report.text)?;
    write_text(&at("report.csv"), &(prov.csv_comment() + &report.csv))?;
    print!("{}", report.text);

    let test = sorted_scenes(&corpus.split(Split::Test));
    let shown: Vec<&ShapeScene> = test.into_iter().take(SHEET_SCENES).collect();
    if !shown.is_empty() {
        ppm(
            &at("samples.ppm"),
            &sample_sheet(&clip, &g, &shown, cfg, seed)?,
        )?;
        ppm(
            &at("segmentation.ppm"),
            &overlay_sheet(&models, &shown, cfg)?,
        )?;
    }
    log(&format!("done; artifacts in {}", resolve(dir).display()));
    Ok(())
}
