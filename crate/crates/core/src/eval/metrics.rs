use un2clip_autograd::Tensor;

use crate::error::{CoreError, Result};

/// Row-wise dot products `a·bᵀ` of `[N, D]` and `[M, D]`, accumulated in f64.
pub fn similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(CoreError::Eval(format!(
            "cannot compare embeddings {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.shape()[0])
        .map(|i| (0..b.shape()[0]).map(|j| dot(a.row(i), b.row(j))).collect())
        .collect())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose own candidate (same row index) ranks within the
/// top `k`. Candidates scoring equal to the true match rank ahead of it when
/// their index is lower.
pub fn recall_at_k(queries: &Tensor<f32>, candidates: &Tensor<f32>, k: usize) -> Result<f64> {
    let n = candidates.shape().first().copied().unwrap_or(0);
    if queries.shape().first() != Some(&n) {
        return Err(CoreError::Eval(
            "queries and candidates must pair up row by row".into(),
        ));
    }
    if k == 0 || k > n {
        return Err(CoreError::Eval(format!("k = {k} outside 1..={n}")));
    }
    let sim = similarity(queries, candidates)?;
    let hits = sim
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let own = row[*i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|(j, s)| **s > own || (**s == own && j < i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CoreError::Eval(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|&&c| c as usize >= num_classes) {
        return Err(CoreError::Eval(format!(
            "label {bad} outside 0..{num_classes}"
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, u)| **u > 0)
        .map(|(i, u)| *i as f64 / *u as f64)
        .collect();
    if ious.is_empty() {
        return Err(CoreError::Eval("empty maps".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
