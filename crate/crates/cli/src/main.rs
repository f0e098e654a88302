mod artifacts;
mod evaluate;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use un2clip_autograd::Tensor;
use un2clip_core::clip::train_clip;
use un2clip_core::corpus::{caption_render, generate_corpus, mine_blind_pairs};
use un2clip_core::diffusion::{sample_batch, train_unclip, SampleMode};
use un2clip_core::eval::{render_report, MetricRecord};
use un2clip_core::finetune::{
    bank_seed, diagnostic_loss, diagnostic_set, finetune, FinetuneMode, NoiseBank,
};
use un2clip_core::io::config::RunConfig;
use un2clip_core::io::ppm::{encode_ppm, sheet};
use un2clip_core::io::write_atomic;

use artifacts::*;
use evaluate::Evaluator;

#[derive(Parser)]
#[command(
    name = "un2clip",
    version,
    about = "Finetune a toy contrastive image encoder by inverting its embedding-conditioned diffusion decoder"
)]
struct Cli {
    /// Run configuration (TOML). Written with defaults when missing.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Root seed every stage derives its randomness from.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes corpus.
    GenData {
        #[arg(long, default_value = "corpus.bin")]
        out: PathBuf,
    },
    /// Inspect corpus files.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Contrastive pretraining of the encoder pair.
    TrainClip {
        #[arg(long, default_value = "corpus.bin")]
        corpus: PathBuf,
        #[arg(long, default_value = "clip.ck")]
        out: PathBuf,
    },
    /// Train the decoder on frozen image embeddings.
    TrainUnclip {
        #[arg(long, default_value = "corpus.bin")]
        corpus: PathBuf,
        #[arg(long, default_value = "clip.ck")]
        clip: PathBuf,
        #[arg(long, default_value = "unclip.ck")]
        out: PathBuf,
    },
    /// Finetune the image encoder against the decoder.
    Finetune {
        #[command(flatten)]
        models: Models,
        /// default, projector_random, projector_identity or update_g.
        #[arg(long, default_value = "default")]
        mode: String,
        /// Overrides `finetune.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "finetune")]
        out_dir: PathBuf,
    },
    /// Diagnostic diffusion loss of an encoder on the shared noise bank.
    Diagnose {
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        projector: Option<PathBuf>,
        /// Which independent bank to use.
        #[arg(long, default_value_t = 0)]
        bank: usize,
    },
    /// Encode test scenes and decode them again.
    Sample {
        #[command(flatten)]
        models: Models,
        /// Scene ids; the first test scenes when omitted.
        #[arg(long, num_args = 1..)]
        scene: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = "ancestral", value_parser = parse_mode)]
        mode: SampleMode,
        #[arg(long, default_value = "samples.ppm")]
        out: PathBuf,
    },
    /// Blind-pair benchmark; pairs are mined with the reference encoder.
    EvalBlind {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "clip.ck")]
        reference: PathBuf,
    },
    /// Training-free segmentation under the four inference variants.
    EvalDense {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Zero-shot shape classification and caption retrieval.
    EvalZeroshot {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Combine metric files into one comparison table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Every stage in sequence under one seed.
    Pipeline {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Dump one scene as PPM plus its attributes.
    Inspect {
        #[arg(long, default_value = "corpus.bin")]
        corpus: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Models {
    #[arg(long, default_value = "corpus.bin")]
    corpus: PathBuf,
    #[arg(long, default_value = "clip.ck")]
    clip: PathBuf,
    #[arg(long, default_value = "unclip.ck")]
    unclip: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "corpus.bin")]
    corpus: PathBuf,
    /// Encoder checkpoint to evaluate.
    #[arg(long, default_value = "clip.ck")]
    model: PathBuf,
    /// Row label in reports; defaults to the checkpoint's file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<SampleMode, String> {
    match s {
        "ancestral" => Ok(SampleMode::Ancestral),
        "deterministic" => Ok(SampleMode::Deterministic),
        _ => Err(format!("unknown sampling mode {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn model_name(args: &EvalArgs) -> String {
    args.name.clone().unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    })
}

fn run(cli: Cli) -> Result<()> {
    let config_path = resolve(&cli.config);
    let cfg = RunConfig::load_or_init(&config_path)
        .with_context(|| format!("config {}", config_path.display()))?;
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: cli.seed,
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out } => {
            let corpus = generate_corpus(&cfg.corpus, seed)?;
            let path = resolve(&out);
            corpus.write(&path)?;
            let [tr, va, te] = corpus.split_counts();
            eprintln!(
                "wrote {} scenes ({tr}/{va}/{te}) to {}",
                corpus.scenes.len(),
                path.display()
            );
        }
        Command::Corpus(CorpusCommand::Inspect { corpus, scene, out }) => {
            let corpus = read_corpus(&corpus)?;
            let s = corpus
                .get(scene)
                .with_context(|| format!("no scene {scene}"))?;
            write_atomic(&resolve(&out), &encode_ppm(&s.image)?)?;
            println!("scene_id: {}", s.scene_id);
            println!("split: {:?}", s.split);
            println!("render_seed: {}", s.render_seed);
            println!("attributes: {}", serde_json::to_string(&s.attrs)?);
            println!("caption: {}", caption_render(&s.attrs));
        }
        Command::TrainClip { corpus, out } => {
            let corpus = read_corpus(&corpus)?;
            let (clip, log) = train_clip(&corpus, &cfg.clip, seed)?;
            eprintln!(
                "best validation recall@1 {:.3} at step {}",
                log.best_recall, log.best_step
            );
            save(
                &clip.to_checkpoint(prov.metadata(cfg.clip.epochs as u64)),
                &out,
            )?;
        }
        Command::TrainUnclip { corpus, clip, out } => {
            let corpus = read_corpus(&corpus)?;
            let clip = load_clip(&clip)?;
            let (g, log) = train_unclip(&corpus, &clip, &cfg.diffusion, seed)?;
            if let Some(l) = log.losses.last() {
                eprintln!("final training loss {l:.4}");
            }
            save(
                &g.to_checkpoint(prov.metadata(cfg.diffusion.epochs as u64)),
                &out,
            )?;
        }
        Command::Finetune {
            models,
            mode,
            epochs,
            out_dir,
        } => {
            let mode = FinetuneMode::parse(&mode)?;
            let corpus = read_corpus(&models.corpus)?;
            let clip = load_clip(&models.clip)?;
            let g = load_denoiser(&models.unclip)?;
            let schedule = cfg.diffusion.schedule.build()?;
            let epochs = epochs.unwrap_or(cfg.finetune.epochs);
            let records = finetune(
                &clip,
                &g,
                &corpus,
                mode,
                epochs,
                &schedule,
                &cfg.finetune,
                seed,
            )?;
            let csv = pipeline::write_finetune(&records, &out_dir, &prov)?;
            print!("{csv}");
        }
        Command::Diagnose {
            models,
            projector,
            bank,
        } => {
            let corpus = read_corpus(&models.corpus)?;
            let clip = load_clip(&models.clip)?;
            let g = load_denoiser(&models.unclip)?;
            let projector = projector.map(|p| load_projector(&p)).transpose()?;
            let schedule = cfg.diffusion.schedule.build()?;
            let diag = diagnostic_set(&corpus, cfg.finetune.diagnostic_images);
            let nb = NoiseBank::new(&diag, &schedule, bank_seed(seed, bank))?;
            let loss = diagnostic_loss(&clip, projector.as_ref(), &g, &diag, &nb, &schedule)?;
            println!("{loss:.6}");
        }
        Command::Sample {
            models,
            scene,
            count,
            mode,
            out,
        } => {
            let corpus = read_corpus(&models.corpus)?;
            let clip = load_clip(&models.clip)?;
            let g = load_denoiser(&models.unclip)?;
            let schedule = cfg.diffusion.schedule.build()?;
            let scenes: Vec<_> = if scene.is_empty() {
                diagnostic_set(&corpus, count)
            } else {
                scene
                    .iter()
                    .map(|id| corpus.get(*id).with_context(|| format!("no scene {id}")))
                    .collect::<Result<_>>()?
            };
            if scenes.is_empty() {
                bail!("no scenes to sample");
            }
            let images: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
            let emb = clip.embed_images(&images)?;
            let seeds: Vec<u64> = (0..scenes.len()).map(|_| seed).collect();
            let decoded = sample_batch(&g, &emb, &seeds, &schedule, mode)?;
            let rows: Vec<Vec<Tensor<f32>>> = images
                .iter()
                .zip(decoded)
                .map(|(a, b)| vec![(*a).clone(), b])
                .collect();
            write_atomic(&resolve(&out), &encode_ppm(&sheet(&rows)?)?)?;
        }
        Command::EvalBlind { eval, reference } => {
            let corpus = read_corpus(&eval.corpus)?;
            let reference = load_clip(&reference)?;
            let model = load_clip(&eval.model)?;
            let mined = mine_blind_pairs(
                &corpus,
                &reference,
                cfg.eval.mining_threshold,
                cfg.eval.pairs_per_family,
            )?;
            for w in &mined.warnings {
                eprintln!(
                    "warning: only {} of {} {} pairs found",
                    w.found, w.requested, w.family
                );
            }
            let ev = Evaluator::new(&corpus, &cfg.eval);
            let records = ev.blind(&model_name(&eval), &model, &mined.pairs)?;
            finish_eval(&ev, &prov, records, &eval.out)?;
        }
        Command::EvalDense { eval } => {
            let corpus = read_corpus(&eval.corpus)?;
            let model = load_clip(&eval.model)?;
            let ev = Evaluator::new(&corpus, &cfg.eval);
            let records = ev.dense(&model_name(&eval), &model)?;
            finish_eval(&ev, &prov, records, &eval.out)?;
        }
        Command::EvalZeroshot { eval } => {
            let corpus = read_corpus(&eval.corpus)?;
            let model = load_clip(&eval.model)?;
            let ev = Evaluator::new(&corpus, &cfg.eval);
            let records = ev.zeroshot(&model_name(&eval), &model)?;
            finish_eval(&ev, &prov, records, &eval.out)?;
        }
        Command::Report { inputs, out } => {
            let files = inputs
                .iter()
                .map(|p| MetricFile::read(p))
                .collect::<Result<Vec<_>>>()?;
            if let Some(f) = files.iter().find(|f| f.corpus != files[0].corpus) {
                bail!(
                    "metric files come from different corpora ({} vs {})",
                    files[0].corpus,
                    f.corpus
                );
            }
            let records: Vec<MetricRecord> = files.into_iter().flat_map(|f| f.records).collect();
            let report = render_report(&records)?;
            print!("{}", report.text);
            write_text(&out, &(prov.csv_comment() + &report.csv))?;
        }
        Command::Pipeline { out_dir } => {
            let dir = out_dir.unwrap_or_else(|| PathBuf::from(format!("pipeline-{seed}")));
            pipeline::run(&cfg, &prov, &dir)?;
        }
    }
    Ok(())
}

fn finish_eval(
    ev: &Evaluator,
    prov: &Provenance,
    records: Vec<MetricRecord>,
    out: &Path,
) -> Result<()> {
    for r in &records {
        println!("{} {} {}", r.model, r.metric, r.formatted());
    }
    MetricFile {
        provenance: prov.clone(),
        corpus: ev.digest.clone(),
        records,
    }
    .write(out)
}
