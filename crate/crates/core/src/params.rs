//! Named parameter collections shared by every model.

use std::collections::HashMap;

use sha2::{Digest, Sha256};
use un2clip_autograd::{
    AdamWState, Gradients, ParamKey, ParamRef, RngStream, Scalar, Tape, Tensor, Var,
};

use crate::error::{CoreError, Result};

/// Parameter groups; a group is the unit of freezing and of gradient checks.
pub mod group {
    pub const IMAGE: u32 = 1;
    pub const TEXT: u32 = 2;
    pub const TEMPERATURE: u32 = 3;
    pub const DENOISER: u32 = 4;
    pub const PROJECTOR: u32 = 5;
}

/// How a frozen model is placed on a tape. Only `Frozen` is legitimate in
/// training code; `Attached` exists to exercise the leak checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Frozen,
    Attached,
}

impl Binding {
    pub fn trainable(self) -> bool {
        self == Binding::Attached
    }
}

/// Ordered, named tensors belonging to one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    group: u32,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut RngStream) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, T::one()));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn key(&self, i: usize) -> ParamKey {
        ParamKey::new(self.group, i as u32)
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.names.len());
        for (i, (n, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let v = if trainable {
                tape.param(t, self.key(i))?
            } else {
                tape.constant(t.clone())
            };
            vars.insert(n.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Mutable views for the optimizer; chain several stores to update them
    /// in one step.
    pub fn param_refs(&mut self) -> impl Iterator<Item = ParamRef<'_, T>> {
        let group = self.group;
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .enumerate()
            .map(move |(i, (name, value))| ParamRef {
                key: ParamKey::new(group, i as u32),
                name,
                value,
            })
    }

    /// One AdamW update of the whole store.
    pub fn apply(&mut self, opt: &mut AdamWState<T>, grads: &Gradients<T>) -> Result<()> {
        opt.step(self.param_refs(), grads)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian element bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            group: self.group,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Rebuilds a store from `(name, tensor)` pairs, checking that names and
    /// shapes agree with `template`.
    pub fn load_like(template: &Self, items: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if items.len() != template.len() {
            return Err(CoreError::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                items.len()
            )));
        }
        let mut out = ParamStore::new(template.group);
        for ((name, t), (tn, tt)) in items.into_iter().zip(template.iter()) {
            if name != tn || t.shape() != tt.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
            out.insert(name, t);
        }
        Ok(out)
    }
}

/// Tape handles of a bound [`ParamStore`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Handles for externally created variables, e.g. the perturbed leaves
    /// of a finite-difference check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

impl std::ops::Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}
