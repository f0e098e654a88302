use serde::{Deserialize, Serialize};
use un2clip_autograd::Tensor;

use super::attrs::PatternFamily;
use super::generate::Corpus;
use super::render::{ShapeScene, Split};
use crate::clip::ClipModel;
use crate::error::{CoreError, Result};
use crate::eval::dot;

/// Two test scenes that differ in exactly one attribute family yet embed
/// close together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindPair {
    pub scene_a: u64,
    pub scene_b: u64,
    pub differing_family: PatternFamily,
    pub cosine_similarity: f64,
}

/// Emitted when a family yields fewer pairs than requested.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningWarning {
    pub family: PatternFamily,
    pub found: usize,
    pub requested: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinedPairs {
    pub pairs: Vec<BlindPair>,
    pub warnings: Vec<MiningWarning>,
}

impl MinedPairs {
    pub fn count(&self, family: PatternFamily) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.differing_family == family)
            .count()
    }
}

/// Mines blind pairs from the test split under `encoder`.
pub fn mine_blind_pairs(
    corpus: &Corpus,
    encoder: &ClipModel,
    threshold: f64,
    per_family: usize,
) -> Result<MinedPairs> {
    let scenes = corpus.split(Split::Test);
    let images: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
    let emb = encoder.embed_images(&images)?;
    mine_with_embeddings(&scenes, &emb, threshold, per_family)
}

/// Mining over precomputed unit embeddings; row `i` of `emb` belongs to
/// `scenes[i]`.
pub fn mine_with_embeddings(
    scenes: &[&ShapeScene],
    emb: &Tensor<f32>,
    threshold: f64,
    per_family: usize,
) -> Result<MinedPairs> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::Eval(format!(
            "mining threshold {threshold} outside (0, 1)"
        )));
    }
    if emb.ndim() != 2 || emb.shape()[0] != scenes.len() {
        return Err(CoreError::Eval(
            "one embedding row per scene required".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by_key(|&i| scenes[i].scene_id);
    let mut by_family: Vec<Vec<BlindPair>> = vec![Vec::new(); PatternFamily::ALL.len()];
    for (x, &i) in order.iter().enumerate() {
        for &j in &order[x + 1..] {
            let (a, b) = (scenes[i], scenes[j]);
            let diff = a.attrs.differing_families(&b.attrs);
            if diff.len() != 1 {
                continue;
            }
            let cos = dot(emb.row(i), emb.row(j)).clamp(-1.0, 1.0);
            if cos >= threshold {
                by_family[diff[0].index()].push(BlindPair {
                    scene_a: a.scene_id,
                    scene_b: b.scene_id,
                    differing_family: diff[0],
                    cosine_similarity: cos,
                });
            }
        }
    }
    let mut out = MinedPairs::default();
    for (family, mut pairs) in PatternFamily::ALL.iter().zip(by_family) {
        pairs.sort_by(|p, q| {
            q.cosine_similarity
                .total_cmp(&p.cosine_similarity)
                .then(p.scene_a.cmp(&q.scene_a))
                .then(p.scene_b.cmp(&q.scene_b))
        });
        pairs.truncate(per_family);
        if pairs.len() < per_family {
            out.warnings.push(MiningWarning {
                family: *family,
                found: pairs.len(),
                requested: per_family,
            });
        }
        out.pairs.extend(pairs);
    }
    Ok(out)
}
