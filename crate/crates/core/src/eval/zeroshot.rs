use un2clip_autograd::Tensor;

use super::metrics::{argmax, recall_at_k, similarity};
use crate::clip::ClipModel;
use crate::corpus::attrs::ShapeClass;
use crate::corpus::caption::{tokenize, CaptionSpec};
use crate::corpus::render::ShapeScene;
use crate::error::{CoreError, Result};

/// Shape-only prompts ("circle", "square", "triangle") in class order.
pub fn shape_prompts() -> Vec<Vec<u32>> {
    ShapeClass::ALL
        .iter()
        .map(|s| tokenize(&CaptionSpec::shape_only(*s).render()).expect("vocabulary word"))
        .collect()
}

/// Accuracy of argmax-cosine classification from precomputed embeddings.
pub fn classify_embeddings(
    images: &Tensor<f32>,
    prompts: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() || images.shape()[0] != labels.len() {
        return Err(CoreError::Eval("one label per image required".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= prompts.shape()[0]) {
        return Err(CoreError::Eval(format!("label {l} has no prompt")));
    }
    let sim = similarity(images, prompts)?;
    let hits = sim
        .iter()
        .zip(labels)
        .filter(|(row, l)| argmax(row) == **l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Shape-class zero-shot accuracy; `class_prompts[c]` describes class `c`.
pub fn zeroshot_classify(
    clip: &ClipModel,
    labeled_set: &[&ShapeScene],
    class_prompts: &[Vec<u32>],
) -> Result<f64> {
    if class_prompts.len() < ShapeClass::ALL.len() {
        return Err(CoreError::Eval("prompts must cover every class".into()));
    }
    let images: Vec<&Tensor<f32>> = labeled_set.iter().map(|s| &s.image).collect();
    let caps: Vec<&[u32]> = class_prompts.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = labeled_set
        .iter()
        .map(|s| s.attrs.shape_class.index())
        .collect();
    classify_embeddings(
        &clip.embed_images(&images)?,
        &clip.embed_texts(&caps)?,
        &labels,
    )
}

/// Image→caption recall@k over the whole set, full captions as candidates.
pub fn retrieval_at_k(clip: &ClipModel, paired_set: &[&ShapeScene], k: usize) -> Result<f64> {
    if k == 0 || k > paired_set.len() {
        return Err(CoreError::Eval(format!(
            "k = {k} outside 1..={}",
            paired_set.len()
        )));
    }
    let images: Vec<&Tensor<f32>> = paired_set.iter().map(|s| &s.image).collect();
    let caps: Vec<&[u32]> = paired_set.iter().map(|s| s.caption.as_slice()).collect();
    recall_at_k(&clip.embed_images(&images)?, &clip.embed_texts(&caps)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_always_right() {
        let img = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap();
        assert_eq!(classify_embeddings(&img, &p, &[0, 0, 0]).unwrap(), 1.0);
    }
}
