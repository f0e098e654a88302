use rayon::prelude::*;
use sha2::{Digest, Sha256};
use un2clip_autograd::{RngStream, Tensor};

use crate::corpus::render::{ShapeScene, CHANNELS, IMAGE_SIZE};
use crate::diffusion::{apply_noise, to_model_space, Denoiser, DiffusionSchedule};
use crate::error::{CoreError, Result};

/// Pairs per image.
pub const BANK_PAIRS: usize = 20;
const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
/// Images denoised per forward pass.
const DIAG_CHUNK: usize = 2;

/// Fixed `(ε, t)` pairs per image so diffusion losses of different encoders
/// are comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    bank_seed: u64,
    schedule_hash: String,
    scene_ids: Vec<u64>,
    /// Per image: `BANK_PAIRS` timesteps.
    timesteps: Vec<[usize; BANK_PAIRS]>,
    /// Per image: `BANK_PAIRS · 3 · 32 · 32` noise values.
    noise: Vec<Vec<f32>>,
}

/// Test scenes in the fixed evaluation order (ascending scene id).
pub fn sorted_scenes<'a>(scenes: &[&'a ShapeScene]) -> Vec<&'a ShapeScene> {
    let mut v = scenes.to_vec();
    v.sort_by_key(|s| s.scene_id);
    v
}

impl NoiseBank {
    pub fn new(
        test_set: &[&ShapeScene],
        schedule: &DiffusionSchedule,
        bank_seed: u64,
    ) -> Result<Self> {
        if test_set.is_empty() {
            return Err(CoreError::NoiseBank("empty test set".into()));
        }
        let root = RngStream::new(bank_seed).split("bank");
        let scenes = sorted_scenes(test_set);
        let mut timesteps = Vec::with_capacity(scenes.len());
        let mut noise = Vec::with_capacity(scenes.len());
        for s in &scenes {
            let mut rng = root.split_index(s.scene_id);
            let mut ts = [0usize; BANK_PAIRS];
            for t in ts.iter_mut() {
                *t = 1 + rng.below(schedule.steps());
            }
            timesteps.push(ts);
            noise.push(
                (0..BANK_PAIRS * PIXELS)
                    .map(|_| rng.normal() as f32)
                    .collect(),
            );
        }
        Ok(Self {
            bank_seed,
            schedule_hash: schedule.hash(),
            scene_ids: scenes.iter().map(|s| s.scene_id).collect(),
            timesteps,
            noise,
        })
    }

    pub fn bank_seed(&self) -> u64 {
        self.bank_seed
    }

    pub fn schedule_hash(&self) -> &str {
        &self.schedule_hash
    }

    pub fn scene_ids(&self) -> &[u64] {
        &self.scene_ids
    }

    pub fn len(&self) -> usize {
        self.scene_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_ids.is_empty()
    }

    pub fn pairs_per_image(&self) -> usize {
        BANK_PAIRS
    }

    pub fn timesteps(&self, image: usize) -> &[usize; BANK_PAIRS] {
        &self.timesteps[image]
    }

    /// Noise of pair `k` of image `image`, `[3, 32, 32]`.
    pub fn noise(&self, image: usize, k: usize) -> &[f32] {
        &self.noise[image][k * PIXELS..(k + 1) * PIXELS]
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.bank_seed.to_le_bytes());
        h.update(self.schedule_hash.as_bytes());
        for ((id, ts), n) in self.scene_ids.iter().zip(&self.timesteps).zip(&self.noise) {
            h.update(id.to_le_bytes());
            for t in ts {
                h.update((*t as u64).to_le_bytes());
            }
            for v in n {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that the bank was built for `schedule` and for exactly these
    /// scenes; returns them in bank order.
    pub fn check<'a>(
        &self,
        test_set: &[&'a ShapeScene],
        schedule: &DiffusionSchedule,
    ) -> Result<Vec<&'a ShapeScene>> {
        if self.schedule_hash != schedule.hash() {
            return Err(CoreError::NoiseBank(
                "bank was built for a different schedule".into(),
            ));
        }
        let scenes = sorted_scenes(test_set);
        if scenes.len() != self.len()
            || scenes
                .iter()
                .zip(&self.scene_ids)
                .any(|(s, id)| s.scene_id != *id)
        {
            return Err(CoreError::NoiseBank(format!(
                "bank covers {} images but the test set has {} (or different scenes)",
                self.len(),
                scenes.len()
            )));
        }
        Ok(scenes)
    }
}

/// Mean squared noise-prediction error over every (image, pair), in bank
/// order. `predict(x_t, t, emb)` maps `[N, 3, 32, 32]` inputs to noise
/// estimates; `emb` has one row per test image (bank order).
pub fn diagnostic_with<F>(
    predict: F,
    test_set: &[&ShapeScene],
    emb: &Tensor<f32>,
    bank: &NoiseBank,
    schedule: &DiffusionSchedule,
) -> Result<f64>
where
    F: Fn(&Tensor<f32>, &[usize], &Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let scenes = bank.check(test_set, schedule)?;
    if emb.ndim() != 2 || emb.shape()[0] != scenes.len() {
        return Err(CoreError::NoiseBank(
            "one embedding per bank image required".into(),
        ));
    }
    let d = emb.shape()[1];
    let idx: Vec<usize> = (0..scenes.len()).collect();
    let sums: Vec<f64> = idx
        .par_chunks(DIAG_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let n = chunk.len() * BANK_PAIRS;
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &scenes[i].image).collect();
            let x0 = to_model_space(&imgs)?;
            let mut x0r = Vec::with_capacity(n * PIXELS);
            let mut eps = Vec::with_capacity(n * PIXELS);
            let mut ts = Vec::with_capacity(n);
            let mut e = Vec::with_capacity(n * d);
            for (c, &i) in chunk.iter().enumerate() {
                for k in 0..BANK_PAIRS {
                    x0r.extend_from_slice(&x0.data()[c * PIXELS..(c + 1) * PIXELS]);
                    eps.extend_from_slice(bank.noise(i, k));
                    ts.push(bank.timesteps(i)[k]);
                    e.extend_from_slice(emb.row(i));
                }
            }
            let shape = [n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
            let x0r = Tensor::from_vec(&shape, x0r)?;
            let eps = Tensor::from_vec(&shape, eps)?;
            let x_t = apply_noise(&x0r, &eps, &ts, schedule);
            let pred = predict(&x_t, &ts, &Tensor::from_vec(&[n, d], e)?)?;
            if pred.shape() != shape {
                return Err(CoreError::NoiseBank(format!(
                    "prediction shape {:?}",
                    pred.shape()
                )));
            }
            Ok(pred
                .data()
                .chunks(BANK_PAIRS * PIXELS)
                .zip(eps.data().chunks(BANK_PAIRS * PIXELS))
                .map(|(p, q)| p.iter().zip(q).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let total: f64 = sums.iter().sum();
    Ok(total / (scenes.len() * BANK_PAIRS * PIXELS) as f64)
}

/// Diagnostic loss of a decoder given per-image conditioning embeddings.
pub fn diagnostic_on_embeddings(
    g: &Denoiser,
    test_set: &[&ShapeScene],
    emb: &Tensor<f32>,
    bank: &NoiseBank,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    diagnostic_with(|x, t, e| g.predict(x, t, e), test_set, emb, bank, schedule)
}
