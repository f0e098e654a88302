use un2clip_autograd::{RngStream, Tensor};

use super::denoiser::{to_image, Denoiser};
use super::schedule::{predict_x0, DiffusionSchedule};
use crate::corpus::render::{CHANNELS, IMAGE_SIZE};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Stochastic reverse process with posterior variance.
    Ancestral,
    /// Zero added noise (η = 0).
    Deterministic,
}

/// Decodes one embedding into a `[32, 32, 3]` image.
pub fn sample(
    g: &Denoiser,
    cond: &Tensor<f32>,
    schedule: &DiffusionSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<Tensor<f32>> {
    let c = cond.clone().reshaped(&[1, cond.len()])?;
    Ok(sample_batch(g, &c, &[seed], schedule, mode)?.remove(0))
}

/// Decodes `[N, E]` embeddings, item `i` driven by its own `seeds[i]`.
pub fn sample_batch(
    g: &Denoiser,
    conds: &Tensor<f32>,
    seeds: &[u64],
    schedule: &DiffusionSchedule,
    mode: SampleMode,
) -> Result<Vec<Tensor<f32>>> {
    let n = seeds.len();
    if conds.shape() != [n, g.arch.embed_dim] {
        return Err(CoreError::Image(format!(
            "expected {n} conditioning rows of width {}, got {:?}",
            g.arch.embed_dim,
            conds.shape()
        )));
    }
    for i in 0..n {
        let norm: f64 = conds
            .row(i)
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(CoreError::Image(format!(
                "conditioning row {i} has norm {norm}, expected 1"
            )));
        }
    }
    let per = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let mut rngs: Vec<RngStream> = seeds
        .iter()
        .map(|&s| RngStream::new(s).split("sample"))
        .collect();
    let mut x: Vec<f64> = Vec::with_capacity(n * per);
    for r in rngs.iter_mut() {
        x.extend((0..per).map(|_| r.normal()));
    }
    let shape = [n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    for t in (1..=schedule.steps()).rev() {
        let xt = Tensor::<f32>::from_f64s(&shape, &x)?;
        let eps = g.predict(&xt, &vec![t; n], conds)?;
        let ab = schedule.alpha_bar[t - 1];
        let ab_prev = if t > 1 {
            schedule.alpha_bar[t - 2]
        } else {
            1.0
        };
        let (alpha, beta) = (schedule.alpha[t - 1], schedule.beta[t - 1]);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        let rows = x.chunks_mut(per).zip(eps.data().chunks(per));
        for ((xs, es), r) in rows.zip(rngs.iter_mut()) {
            for (xj, &e) in xs.iter_mut().zip(es) {
                let (xv, e) = (*xj, e as f64);
                *xj = match mode {
                    SampleMode::Ancestral => {
                        let mean = (xv - beta / (1.0 - ab).sqrt() * e) / alpha.sqrt();
                        if t > 1 {
                            mean + sigma * r.normal()
                        } else {
                            mean
                        }
                    }
                    SampleMode::Deterministic => {
                        let x0 = predict_x0(xv, e, ab);
                        ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
                    }
                };
            }
        }
    }
    let out = Tensor::<f32>::from_f64s(&shape, &x)?;
    Ok((0..n).map(|i| to_image(&out, i)).collect())
}
