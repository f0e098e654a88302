use serde::{Deserialize, Serialize};
use un2clip_autograd::Tensor;

use super::metrics::dot;
use crate::clip::ClipModel;
use crate::corpus::attrs::PatternFamily;
use crate::corpus::generate::Corpus;
use crate::corpus::mining::BlindPair;
use crate::error::{CoreError, Result};

/// Image `i` is right when its own caption scores strictly higher than the
/// other one; a pair counts only when both images are right.
pub fn pair_correct(m: [[f64; 2]; 2]) -> bool {
    m[0][0] > m[0][1] && m[1][1] > m[1][0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family: String,
    pub correct: usize,
    pub pairs: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindPairResult {
    pub per_family: Vec<FamilyScore>,
    /// Unweighted mean over families with at least one pair.
    pub average: f64,
}

impl BlindPairResult {
    /// Builds the result from `(family, correct, pairs)` rows.
    pub fn from_counts(rows: &[(String, usize, usize)]) -> Self {
        let per_family: Vec<FamilyScore> = rows
            .iter()
            .map(|(f, c, n)| FamilyScore {
                family: f.clone(),
                correct: *c,
                pairs: *n,
                accuracy: if *n == 0 { 0.0 } else { *c as f64 / *n as f64 },
            })
            .collect();
        let scored: Vec<f64> = per_family
            .iter()
            .filter(|s| s.pairs > 0)
            .map(|s| s.accuracy)
            .collect();
        let average = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        Self {
            per_family,
            average,
        }
    }

    pub fn family(&self, name: &str) -> Option<&FamilyScore> {
        self.per_family.iter().find(|s| s.family == name)
    }
}

/// Scores each pair's 2×2 image–caption matrix, grouped by family.
pub fn score_matrices(items: &[(PatternFamily, [[f64; 2]; 2])]) -> BlindPairResult {
    let rows: Vec<(String, usize, usize)> = PatternFamily::ALL
        .iter()
        .map(|f| {
            let mine: Vec<_> = items.iter().filter(|(g, _)| g == f).collect();
            let correct = mine.iter().filter(|(_, m)| pair_correct(*m)).count();
            (f.word().to_string(), correct, mine.len())
        })
        .collect();
    BlindPairResult::from_counts(&rows)
}

/// Blind-pair benchmark of `clip` on pairs drawn from `corpus`, each image
/// judged against the two full captions.
pub fn blind_pair_accuracy(
    clip: &ClipModel,
    pairs: &[BlindPair],
    corpus: &Corpus,
) -> Result<BlindPairResult> {
    let mut images: Vec<&Tensor<f32>> = Vec::with_capacity(2 * pairs.len());
    let mut captions: Vec<&[u32]> = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        for id in [p.scene_a, p.scene_b] {
            let s = corpus
                .get(id)
                .ok_or_else(|| CoreError::Eval(format!("scene {id} not in corpus")))?;
            if s.caption.is_empty() {
                return Err(CoreError::Eval(format!("scene {id} has no caption")));
            }
            images.push(&s.image);
            captions.push(&s.caption);
        }
    }
    if pairs.is_empty() {
        return Ok(score_matrices(&[]));
    }
    let ie = clip.embed_images(&images)?;
    let te = clip.embed_texts(&captions)?;
    let items: Vec<(PatternFamily, [[f64; 2]; 2])> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (a, b) = (2 * i, 2 * i + 1);
            let m = [
                [dot(ie.row(a), te.row(a)), dot(ie.row(a), te.row(b))],
                [dot(ie.row(b), te.row(a)), dot(ie.row(b), te.row(b))],
            ];
            (p.differing_family, m)
        })
        .collect();
    Ok(score_matrices(&items))
}
