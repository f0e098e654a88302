use serde::{Deserialize, Serialize};
use un2clip_autograd::Tensor;

use crate::clip::ClipModel;
use crate::corpus::render::ShapeScene;
use crate::error::{CoreError, Result};
use crate::eval::cosine;

/// Cosine distance between image embeddings and the original text
/// embeddings of their captions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub finetuned: f64,
    pub original: f64,
    /// `finetuned − original`.
    pub delta: f64,
}

fn mean_distance(img: &Tensor<f32>, txt: &Tensor<f32>) -> f64 {
    let n = img.shape()[0];
    (0..n)
        .map(|i| 1.0 - cosine(img.row(i), txt.row(i)))
        .sum::<f64>()
        / n as f64
}

/// Drift from precomputed `[N, D]` embeddings; row `i` of each matrix
/// belongs to the same scene.
pub fn drift_from_embeddings(
    new_img: &Tensor<f32>,
    orig_img: &Tensor<f32>,
    text: &Tensor<f32>,
) -> Result<DriftReport> {
    if new_img.ndim() != 2 || new_img.shape()[0] == 0 {
        return Err(CoreError::Eval(
            "drift needs a non-empty evaluation set".into(),
        ));
    }
    if new_img.shape() != orig_img.shape() || new_img.shape() != text.shape() {
        return Err(CoreError::Eval(
            "drift embeddings must share one shape".into(),
        ));
    }
    let finetuned = mean_distance(new_img, text);
    let original = mean_distance(orig_img, text);
    Ok(DriftReport {
        finetuned,
        original,
        delta: finetuned - original,
    })
}

/// Text embeddings come from `orig`'s text tower, which finetuning never
/// touches.
pub fn alignment_drift(
    new: &ClipModel,
    orig: &ClipModel,
    eval_set: &[&ShapeScene],
) -> Result<DriftReport> {
    if eval_set.is_empty() {
        return Err(CoreError::Eval(
            "drift needs a non-empty evaluation set".into(),
        ));
    }
    let images: Vec<&Tensor<f32>> = eval_set.iter().map(|s| &s.image).collect();
    let caps: Vec<&[u32]> = eval_set.iter().map(|s| s.caption.as_slice()).collect();
    let text = orig.embed_texts(&caps)?;
    drift_from_embeddings(
        &new.embed_images(&images)?,
        &orig.embed_images(&images)?,
        &text,
    )
}
