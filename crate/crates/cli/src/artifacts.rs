//! Where files go and what they carry besides their payload.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use un2clip_core::clip::ClipModel;
use un2clip_core::corpus::Corpus;
use un2clip_core::diffusion::Denoiser;
use un2clip_core::eval::MetricRecord;
use un2clip_core::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata};
use un2clip_core::io::write_atomic;
use un2clip_core::params::{group, ParamStore};

/// Environment variable naming the directory relative paths resolve under.
pub const OUT_ROOT_VAR: &str = "UN2CLIP_OUT";
pub const PROJECTOR_KIND: &str = "projector";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Relative paths are taken under the output root.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_root().join(path)
    }
}

/// Provenance stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn metadata(&self, epoch: u64) -> Metadata {
        Metadata {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            epoch,
            ..Metadata::default()
        }
    }

    /// First line of every CSV the tool writes.
    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let path = resolve(path);
    Corpus::read(&path).with_context(|| format!("reading corpus {}", path.display()))
}

pub fn load_clip(path: &Path) -> Result<ClipModel> {
    let path = resolve(path);
    let ck = load_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ClipModel::from_checkpoint(&ck)?)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let path = resolve(path);
    let ck = load_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Denoiser::from_checkpoint(&ck)?)
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let path = resolve(path);
    save_checkpoint(ck, &path).with_context(|| format!("writing {}", path.display()))
}

pub fn projector_checkpoint(p: &ParamStore, metadata: Metadata) -> Checkpoint {
    let mut ck = Checkpoint::new(PROJECTOR_KIND, metadata);
    for (n, t) in p.iter() {
        ck.push(n, t.clone());
    }
    ck
}

pub fn load_projector(path: &Path) -> Result<ParamStore> {
    let path = resolve(path);
    let ck = load_checkpoint(&path)?.expect_kind(PROJECTOR_KIND)?;
    let mut p = ParamStore::new(group::PROJECTOR);
    for (n, t) in ck.tensors {
        p.insert(n, t);
    }
    if !(p.contains("w") && p.contains("b")) {
        bail!("projector checkpoint {} lacks w or b", path.display());
    }
    Ok(p)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let path = resolve(path);
    write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Metric records of one evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricFile {
    pub provenance: Provenance,
    pub corpus: String,
    pub records: Vec<MetricRecord>,
}

impl MetricFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path = resolve(path);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
