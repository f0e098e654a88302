use std::collections::BTreeMap;

use crate::error::{AutogradError, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, ParamKey};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamWState<T = f32> {
    pub hyper: AdamWConfig,
    step_count: u64,
    moments: BTreeMap<ParamKey, (Vec<T>, Vec<T>)>,
}

/// A parameter offered to the optimizer.
pub struct ParamRef<'a, T> {
    pub key: ParamKey,
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every parameter in `params`. All gradients are validated
    /// before any parameter is touched, so a failed step leaves everything as
    /// it was.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = ParamRef<'a, T>>,
        grads: &Gradients<T>,
    ) -> Result<()> {
        let mut params: Vec<ParamRef<'a, T>> = params.into_iter().collect();
        for p in &params {
            let g = grads.get(p.key).ok_or_else(|| {
                AutogradError::Contract(format!("no gradient for parameter {}", p.name))
            })?;
            if g.shape() != p.value.shape() {
                return Err(AutogradError::Shape {
                    op: "adamw",
                    detail: format!(
                        "parameter {} has shape {:?}, gradient {:?}",
                        p.name,
                        p.value.shape(),
                        g.shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(AutogradError::NonFiniteGradient(p.name.to_string()));
            }
            if let Some((m, _)) = self.moments.get(&p.key) {
                if m.len() != p.value.len() {
                    return Err(AutogradError::Shape {
                        op: "adamw",
                        detail: format!("moment size changed for parameter {}", p.name),
                    });
                }
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64(1.0 - h.learning_rate * h.weight_decay);
        for p in params.iter_mut() {
            let g = grads.get(p.key).expect("validated").data();
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(p.key)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                let mhat = m[j].as_f64() / c1;
                let vhat = v[j].as_f64() / c2;
                let upd = h.learning_rate * mhat / (vhat.sqrt() + h.epsilon);
                *theta = *theta * decay - T::from_f64(upd);
            }
        }
        Ok(())
    }
}
