use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::ClipConfig;
use crate::corpus::generate::CorpusConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{CoreError, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum cosine similarity for a blind pair.
    pub mining_threshold: f64,
    pub pairs_per_family: usize,
    /// Patches whose best class cosine falls below this are background.
    pub background_threshold: f64,
    /// Recall cut-offs reported for retrieval.
    pub retrieval_k: Vec<usize>,
    /// Overlay colours per label (background first) for segmentation PPMs.
    pub palette: Vec<[u8; 3]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mining_threshold: 0.8,
            pairs_per_family: 30,
            background_threshold: 0.2,
            retrieval_k: vec![1, 5],
            palette: vec![[0, 0, 0], [230, 60, 60], [60, 200, 60], [70, 110, 240]],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mining_threshold > 0.0 && self.mining_threshold < 1.0) {
            return Err(CoreError::Config(
                "mining_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.retrieval_k.contains(&0) {
            return Err(CoreError::Config(
                "retrieval_k entries must be positive".into(),
            ));
        }
        if self.palette.len() < 4 {
            return Err(CoreError::Config(
                "palette needs background plus three class colours".into(),
            ));
        }
        Ok(())
    }
}

/// Finetuning modes run by the pipeline, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub modes: Vec<FinetuneMode>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modes: FinetuneMode::ALL.to_vec(),
        }
    }
}

/// Every tunable of a run, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub clip: ClipConfig,
    pub diffusion: DiffusionConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.clip.validate()?;
        self.diffusion.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        if self.diffusion.arch.embed_dim != self.clip.arch.dim {
            return Err(CoreError::Config(format!(
                "diffusion.arch.embed_dim ({}) must equal clip.arch.dim ({})",
                self.diffusion.arch.embed_dim, self.clip.arch.dim
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Reads `path`, or writes the defaults there when it does not exist.
    pub fn load_or_init(path: &Path) -> Result<Self> {
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
            Self::from_toml(&text)
        } else {
            let c = Self::default();
            write_atomic(path, c.to_toml().as_bytes())?;
            Ok(c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default().to_toml();
        text = text.replacen("[corpus]\n", "[corpus]\nsurprise = 1\n", 1);
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(CoreError::Config(_))
        ));
    }
}
