use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParameterStore};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared on an absolute scale.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            max_coords_per_param: None,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central finite differences of `loss` for every
/// parameter that has a gradient slot. Parameter values are restored exactly.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    analytic: &Gradients,
    mut loss: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let Some(grad) = analytic.get(id) else {
            continue;
        };
        let grad = grad.data().to_vec();
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = loss(store);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = loss(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad[i], numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.param(id).name.clone());
                report.worst_index = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn quadratic(store: &ParameterStore) -> f64 {
        let w = store.value(store.id("w").unwrap()).data()[0];
        w * w
    }

    #[test]
    fn quadratic_at_three() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0]), true);
        let mut g = Gradients::for_store(&store);
        g.slot_mut(id).unwrap().data_mut()[0] = 6.0;
        let rep = grad_check(&mut store, &g, quadratic, &GradCheckOptions::default());
        assert!((rep.numeric - 6.0).abs() < 1e-6);
        assert!(rep.passes(1e-6));
        assert_eq!(store.value(id).data(), &[3.0]);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut store = ParameterStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, -2.0]), true);
        let b = store.add("b", Tensor::vector(vec![0.5]), true);
        let f = |s: &ParameterStore| {
            let a = s.value(s.id("a").unwrap()).data();
            let b = s.value(s.id("b").unwrap()).data()[0];
            a[0] * a[0] + 3.0 * a[1] + b.powi(3)
        };
        let mut g = Gradients::for_store(&store);
        g.slot_mut(a).unwrap().data_mut().copy_from_slice(&[2.0, 3.0]);
        g.slot_mut(b).unwrap().data_mut()[0] = 3.0 * 0.25 * 1.5; // wrong: should be 0.75
        let rep = grad_check(&mut store, &g, f, &GradCheckOptions::default());
        assert_eq!(rep.worst_param.as_deref(), Some("b"));
        assert!(!rep.passes(1e-4));
    }
}
