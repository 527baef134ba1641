use rand::Rng;

use super::{Gradients, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Lookup table mapping ids to dense rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_uniform(format!("{name}.table"), &[vocab, dim], 0.1, rng);
        Embedding { table, vocab, dim }
    }

    /// Gathers one row per id into a `[ids.len() x dim]` matrix.
    pub fn forward(&self, store: &ParameterStore, ids: &[usize]) -> Result<Tensor> {
        let table = store.value(self.table);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= self.vocab {
                return Err(Error::Vocabulary {
                    id,
                    size: self.vocab,
                });
            }
            out.extend_from_slice(table.row(id));
        }
        Tensor::from_vec(&[ids.len(), self.dim], out)
    }

    pub fn backward(&self, ids: &[usize], dy: &Tensor, grads: &mut Gradients) {
        if let Some(g) = grads.slot_mut(self.table) {
            for (r, &id) in ids.iter().enumerate() {
                let src = dy.row(r);
                for (a, b) in g.row_mut(id).iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
}
