use super::ops::{sigmoid, softplus};
use super::Tensor;
use crate::error::{Error, Result};

fn check_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, "target", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mse_loss_grad(pred, target)?.0)
}

/// MSE and its gradient with respect to `pred`.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("mse_loss", pred, target)?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 flags.
pub fn bce_stop_loss(logits: &Tensor, flags: &Tensor) -> Result<f64> {
    Ok(bce_stop_loss_grad(logits, flags)?.0)
}

/// BCE and its gradient with respect to the logits.
///
/// Uses `softplus(z) - y z`, which equals `-y ln σ(z) - (1-y) ln(1-σ(z))`.
pub fn bce_stop_loss_grad(logits: &Tensor, flags: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("bce_stop_loss", logits, flags)?;
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut sum = 0.0;
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(flags.data()) {
        sum += softplus(z) - y * z;
        *g = (sigmoid(z) - y) / n;
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let x = Tensor::vector(vec![1.5, -2.0, 3.25]);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mse_mean_of_squares() {
        let a = Tensor::vector(vec![0.0, 2.0]);
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(mse_loss(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn bce_matches_term_by_term_reference() {
        let z: [f64; 5] = [-3.2, -0.4, 0.0, 0.9, 5.5];
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let reference: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 5.0;
        let got = bce_stop_loss(&Tensor::vector(z.to_vec()), &Tensor::vector(y.to_vec())).unwrap();
        assert!((got - reference).abs() < 1e-13, "{got} vs {reference}");
    }

    #[test]
    fn bce_is_stable_at_extreme_logits() {
        let l = bce_stop_loss(
            &Tensor::vector(vec![800.0, -800.0]),
            &Tensor::vector(vec![1.0, 0.0]),
        )
        .unwrap();
        assert!(l.is_finite() && l < 1e-300);
        let l = bce_stop_loss(&Tensor::vector(vec![800.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(l, 800.0);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let e = mse_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(e, Error::Dimension { .. }));
        let e = bce_stop_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[2, 1])).unwrap_err();
        assert!(matches!(e, Error::Dimension { .. }));
    }
}
