//! Finetuning the image encoder through a frozen embedding-conditioned
//! decoder, with ablations, drift and the shared-noise diagnostic.

mod bank;
mod drift;
mod run;
mod sweep;

pub use bank::{diagnostic_on_embeddings, diagnostic_with, sorted_scenes, NoiseBank, BANK_PAIRS};
pub use drift::{alignment_drift, drift_from_embeddings, DriftReport};
pub use run::{
    make_projector, project_embeddings, un2clip_step, FinetuneConfig, FinetuneMode, FinetuneRun,
};
pub use sweep::{
    bank_seed, diagnostic_loss, diagnostic_set, finetune, metrics_csv, EpochRecord, METRICS_HEADER,
};
