//! Shared pieces of the training loops.

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, ParameterStore};
use crate::par;

/// Examples per gradient chunk. Fixed so that summation order, and therefore
/// every trained parameter, is independent of the thread count.
pub const GRAD_CHUNK: usize = 32;

/// Sum of per-example losses and the matching gradient buffer for one chunk.
pub struct ChunkResult {
    pub grads: Gradients,
    pub loss_sum: f64,
    pub count: usize,
}

/// Evaluates `f` on fixed-size chunks of `items` (in parallel when enabled)
/// and sums the results in chunk order, so the total does not depend on how
/// many threads ran.
pub fn batch_gradients<T, F>(items: &[T], chunk: usize, f: F) -> Result<ChunkResult>
where
    T: Sync,
    F: Fn(&[T]) -> Result<ChunkResult> + Sync + Send,
{
    let ranges = par::chunk_ranges(items.len(), chunk);
    let parts = par::map(&ranges, |r| f(&items[r.clone()]));
    let mut total: Option<ChunkResult> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => {
                t.grads.merge(&part.grads)?;
                t.loss_sum += part.loss_sum;
                t.count += part.count;
            }
        }
    }
    total.ok_or(Error::EmptyInput("batch_gradients"))
}

/// Applies one optimizer step from a summed gradient: divides by `count`,
/// clips the global norm and updates. Returns the mean loss.
pub fn apply_step(
    store: &mut ParameterStore,
    adam: &mut AdamState,
    mut result: ChunkResult,
    clip: f64,
    iteration: usize,
) -> Result<f64> {
    let denom = result.count.max(1) as f64;
    let loss = result.loss_sum / denom;
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration,
            detail: format!("loss is {loss}"),
        });
    }
    result.grads.scale(1.0 / denom);
    store.zero_grad();
    store.accumulate(&result.grads)?;
    if clip > 0.0 {
        store.clip_grad_norm(clip);
    }
    adam_step(store, adam)?;
    if !store.all_finite() {
        return Err(Error::Training {
            iteration,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(loss)
}
