use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside the [`ParameterStore`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    touched: bool,
}

/// Named dense parameters with paired gradient accumulators.
///
/// Insertion order is stable and defines checkpoint order and the reduction
/// order of [`ParameterStore::accumulate`].
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
            touched: false,
        });
        ParamId(id)
    }

    /// Glorot-uniform matrix in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_dense<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, &[fan_in, fan_out], limit, rng)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape"), true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched = false;
        }
    }

    pub(crate) fn is_touched(&self, id: ParamId) -> bool {
        self.params[id.0].touched
    }

    /// Adds a gradient buffer into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.slots.len() != self.params.len() {
            return Err(Error::dim(
                "ParameterStore::accumulate",
                "grads",
                self.params.len(),
                grads.slots.len(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.grad.add_assign(g)?;
                p.touched = true;
            }
        }
        Ok(())
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.scale(s);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Per-pass gradient buffer aligned with one [`ParameterStore`].
///
/// Slots exist only for parameters that were trainable when the buffer was
/// created; layers skip weight-gradient work for the others.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn for_store(store: &ParameterStore) -> Self {
        Gradients {
            slots: store
                .params
                .iter()
                .map(|p| p.trainable.then(|| Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    /// A buffer that wants nothing: backward passes only propagate input gradients.
    pub fn frozen(store: &ParameterStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn wants(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(Option::is_some)
    }

    pub fn slot_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slots.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Elementwise sum of another buffer of the same layout.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, None) => {}
                _ => {
                    return Err(Error::dim(
                        "Gradients::merge",
                        "slot layout",
                        "matching",
                        "different",
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale(factor);
        }
    }
}
