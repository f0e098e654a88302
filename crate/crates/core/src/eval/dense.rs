use serde::{Deserialize, Serialize};
use un2clip_autograd::Tensor;

use super::metrics::{argmax, dot, miou};
use crate::clip::{ClipModel, LastBlock};
use crate::corpus::render::{ShapeScene, IMAGE_SIZE};
use crate::error::{CoreError, Result};

/// Training-free dense-inference variants of the image tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseVariant {
    /// Final patch tokens.
    Vanilla,
    /// Last-block value projections, no attention mixing.
    ValueExtract,
    /// Last-block attention weights from `q·qᵀ + k·kᵀ`.
    CorrelativeAttn,
    /// Last block without residual path and feed-forward sublayer.
    ResidualFree,
}

impl DenseVariant {
    pub const ALL: [DenseVariant; 4] = [
        DenseVariant::Vanilla,
        DenseVariant::ValueExtract,
        DenseVariant::CorrelativeAttn,
        DenseVariant::ResidualFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DenseVariant::Vanilla => "vanilla",
            DenseVariant::ValueExtract => "value_extract",
            DenseVariant::CorrelativeAttn => "correlative_attn",
            DenseVariant::ResidualFree => "residual_free",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Eval(format!("unknown dense variant {s:?}")))
    }

    pub fn last_block(self) -> LastBlock {
        match self {
            DenseVariant::Vanilla => LastBlock::Standard,
            DenseVariant::ValueExtract => LastBlock::ValueOnly,
            DenseVariant::CorrelativeAttn => LastBlock::Correlative,
            DenseVariant::ResidualFree => LastBlock::ResidualFree,
        }
    }
}

/// Pixel label map. With `background` set, 0 is background and class `c`
/// is labelled `c + 1`; otherwise labels are class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub labels: Vec<u8>,
    pub variant: DenseVariant,
    pub background: bool,
}

impl SegPrediction {
    pub fn num_labels(&self, classes: usize) -> usize {
        classes + self.background as usize
    }
}

/// Labels a `grid × grid` map of patch features (`[grid², D]`) against
/// class embeddings (`[C, D]`) and upsamples it to the pixel grid by nearest
/// neighbour. Patches whose best cosine is below `threshold` become
/// background.
pub fn label_patches(
    features: &Tensor<f32>,
    text: &Tensor<f32>,
    threshold: Option<f64>,
) -> Result<Vec<u8>> {
    let (p, c) = (features.shape()[0], text.shape()[0]);
    let grid = (p as f64).sqrt() as usize;
    if grid * grid != p || !IMAGE_SIZE.is_multiple_of(grid) {
        return Err(CoreError::Eval(format!(
            "{p} patches do not form a square grid"
        )));
    }
    if c == 0 {
        return Err(CoreError::Eval("no class prompts".into()));
    }
    let norms: Vec<f64> = (0..c)
        .map(|j| dot(text.row(j), text.row(j)).sqrt())
        .collect();
    let patch_labels: Vec<u8> = (0..p)
        .map(|i| {
            let f = features.row(i);
            let fnorm = dot(f, f).sqrt().max(1e-12);
            let sims: Vec<f64> = (0..c)
                .map(|j| dot(f, text.row(j)) / (fnorm * norms[j].max(1e-12)))
                .collect();
            let best = argmax(&sims);
            match threshold {
                Some(th) if sims[best] < th => 0,
                Some(_) => best as u8 + 1,
                None => best as u8,
            }
        })
        .collect();
    let scale = IMAGE_SIZE / grid;
    let mut out = vec![0u8; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            out[y * IMAGE_SIZE + x] = patch_labels[(y / scale) * grid + x / scale];
        }
    }
    Ok(out)
}

fn prompt_embeddings(clip: &ClipModel, class_prompts: &[Vec<u32>]) -> Result<Tensor<f32>> {
    if class_prompts.is_empty() {
        return Err(CoreError::Eval("no class prompts".into()));
    }
    let caps: Vec<&[u32]> = class_prompts.iter().map(Vec::as_slice).collect();
    clip.embed_texts(&caps)
}

pub fn dense_segment(
    clip: &ClipModel,
    image: &Tensor<f32>,
    class_prompts: &[Vec<u32>],
    variant: DenseVariant,
    threshold: Option<f64>,
) -> Result<SegPrediction> {
    let text = prompt_embeddings(clip, class_prompts)?;
    let f = clip.dense_features(&[image], variant.last_block())?;
    let (n, d) = (f.shape()[1], f.shape()[2]);
    Ok(SegPrediction {
        labels: label_patches(&f.reshaped(&[n, d])?, &text, threshold)?,
        variant,
        background: threshold.is_some(),
    })
}

/// Dataset mIoU: intersections and unions accumulated over every pixel of
/// every scene, against the ground-truth masks (background 0, shape class
/// labels from 1). Patches below `threshold` are background.
pub fn dense_miou(
    clip: &ClipModel,
    scenes: &[&ShapeScene],
    class_prompts: &[Vec<u32>],
    variant: DenseVariant,
    threshold: f64,
) -> Result<f64> {
    let (pred, gt) = dense_labels(clip, scenes, class_prompts, variant, Some(threshold))?;
    miou(&pred, &gt, class_prompts.len() + 1)
}

/// Dataset mIoU without a background class: only shape pixels are scored,
/// each labelled by plain argmax over the class prompts.
pub fn dense_miou_objects(
    clip: &ClipModel,
    scenes: &[&ShapeScene],
    class_prompts: &[Vec<u32>],
    variant: DenseVariant,
) -> Result<f64> {
    let (pred, gt) = dense_labels(clip, scenes, class_prompts, variant, None)?;
    let (pred, gt): (Vec<u8>, Vec<u8>) = pred
        .iter()
        .zip(&gt)
        .filter(|(_, g)| **g > 0)
        .map(|(p, g)| (*p, g - 1))
        .unzip();
    miou(&pred, &gt, class_prompts.len())
}

fn dense_labels(
    clip: &ClipModel,
    scenes: &[&ShapeScene],
    class_prompts: &[Vec<u32>],
    variant: DenseVariant,
    threshold: Option<f64>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let text = prompt_embeddings(clip, class_prompts)?;
    let images: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.image).collect();
    let f = clip.dense_features(&images, variant.last_block())?;
    let (n, d) = (f.shape()[1], f.shape()[2]);
    let mut pred = Vec::with_capacity(scenes.len() * IMAGE_SIZE * IMAGE_SIZE);
    let mut gt = Vec::with_capacity(pred.capacity());
    for (i, s) in scenes.iter().enumerate() {
        let rows = Tensor::from_vec(&[n, d], f.data()[i * n * d..(i + 1) * n * d].to_vec())?;
        pred.extend(label_patches(&rows, &text, threshold)?);
        gt.extend_from_slice(&s.mask);
    }
    Ok((pred, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_variant_rejected() {
        assert!(DenseVariant::parse("mask_clip").is_err());
        for v in DenseVariant::ALL {
            assert_eq!(DenseVariant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn one_hot_fixture() {
        // 2×2 patch grid; patch i aligned with class i % 3.
        let mut f = vec![0f32; 4 * 3];
        for i in 0..4 {
            f[i * 3 + i % 3] = 1.0;
        }
        let feats = Tensor::from_vec(&[4, 3], f).unwrap();
        let text = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let labels = label_patches(&feats, &text, None).unwrap();
        assert_eq!(labels[0], 0);
        assert_eq!(labels[31], 1);
        assert_eq!(labels[32 * 31], 2);
        assert_eq!(labels[32 * 32 - 1], 0);
        let bg = label_patches(&feats, &text, Some(0.5)).unwrap();
        assert_eq!(bg[0], 1);
    }
}
