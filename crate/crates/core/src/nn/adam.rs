use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update to every trainable parameter.
///
/// Every trainable parameter must have received a gradient since the last
/// [`ParameterStore::zero_grad`].
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim("adam_step", "state", store.len(), state.m.len()));
    }
    for id in store.ids() {
        let p = store.param(id);
        if p.trainable && !store.is_touched(id) {
            return Err(Error::IncompleteBackward(p.name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for id in store.ids().collect::<Vec<_>>() {
        if !store.param(id).trainable {
            continue;
        }
        let shape = store.value(id).shape().to_vec();
        let m = state.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        let grad = store.grad(id).data().to_vec();
        let value = store.value_mut(id).data_mut();
        for (((p, g), mi), vi) in value
            .iter_mut()
            .zip(&grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Gradients;

    fn scalar_store(w: f64, trainable: bool) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::vector(vec![w]), trainable);
        s
    }

    fn set_grad(store: &mut ParameterStore, g: f64) {
        store.zero_grad();
        let mut grads = Gradients::for_store(store);
        let id = store.id("w").unwrap();
        if let Some(t) = grads.slot_mut(id) {
            t.data_mut()[0] = g;
        }
        store.accumulate(&grads).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(0.7, true);
        let mut st = AdamState::new(&store, AdamConfig::default());
        for _ in 0..3 {
            set_grad(&mut store, 0.0);
            adam_step(&mut store, &mut st).unwrap();
        }
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut store = scalar_store(0.0, true);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&store, cfg);
        set_grad(&mut store, 1.0);
        adam_step(&mut store, &mut st).unwrap();
        let want = -cfg.lr * 1.0 / (1.0 + cfg.eps);
        let got = store.value(store.id("w").unwrap()).data()[0];
        assert!((got - want).abs() < 1e-18, "{got} vs {want}");
    }

    #[test]
    fn frozen_entry_is_untouched() {
        let mut store = scalar_store(2.5, false);
        let mut st = AdamState::new(&store, AdamConfig::default());
        store.zero_grad();
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[2.5]);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut store = scalar_store(1.0, true);
        let mut st = AdamState::new(&store, AdamConfig::default());
        store.zero_grad();
        let err = adam_step(&mut store, &mut st).unwrap_err();
        assert!(matches!(err, Error::IncompleteBackward(name) if name == "w"));
    }

    #[test]
    fn step_counter_increases_and_is_deterministic() {
        let run = || {
            let mut store = scalar_store(0.3, true);
            let mut st = AdamState::new(&store, AdamConfig::default());
            for k in 0..5 {
                set_grad(&mut store, (k as f64 * 0.7).sin());
                adam_step(&mut store, &mut st).unwrap();
                assert_eq!(st.step_count(), k + 1);
            }
            store.value(store.id("w").unwrap()).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
