//! Framework-free differentiable kernels: dense layers, (B)LSTMs, embeddings,
//! losses, Adam and finite-difference gradient checking. Everything is `f64`.

pub mod adam;
pub mod checkpoint;
pub mod embedding;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod lstm;
pub mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use embedding::Embedding;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use linear::{linear_forward, Linear};
pub use loss::{bce_stop_loss, bce_stop_loss_grad, mse_loss, mse_loss_grad};
pub use lstm::{blstm_forward, lstm_cell_step, Blstm, BlstmTrace, Lstm, LstmState, LstmTrace, LstmWeights};
pub use params::{Gradients, Param, ParamId, ParameterStore};
pub use tensor::Tensor;

/// Mean over the valid positions of a time-major `[T*B x H]` sequence;
/// rows with length 0 pool to zeros.
pub fn masked_mean(hs: &Tensor, batch: usize, lengths: &[usize]) -> Tensor {
    let hd = hs.cols();
    let mut out = Tensor::zeros(&[batch, hd]);
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let row = out.row_mut(b);
        for t in 0..len {
            for (o, v) in row.iter_mut().zip(hs.row(t * batch + b)) {
                *o += v;
            }
        }
        let inv = 1.0 / len as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Adjoint of [`masked_mean`]: scatters `d_mean` evenly over valid positions.
pub fn masked_mean_backward(d_mean: &Tensor, steps: usize, lengths: &[usize]) -> Tensor {
    let batch = lengths.len();
    let hd = d_mean.cols();
    let mut out = Tensor::zeros(&[steps * batch, hd]);
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let inv = 1.0 / len as f64;
        for t in 0..len {
            for (o, v) in out.row_mut(t * batch + b).iter_mut().zip(d_mean.row(b)) {
                *o = v * inv;
            }
        }
    }
    out
}
