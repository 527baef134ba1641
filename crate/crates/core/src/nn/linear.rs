use rand::Rng;

use super::ops::{accumulate_col_sums, add_row_bias, gemm, gemv_acc, Op};
use super::{Gradients, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b` applied row-wise: `x` is `[B x I]`, `w` is `[I x O]`, `b` is `[O]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::dim("linear_forward", "W", "rank 2", w.shape()));
    }
    let (i, o) = (w.shape()[0], w.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != i {
        return Err(Error::dim("linear_forward", "x", [x.rows(), i], x.shape()));
    }
    if b.shape() != [o] {
        return Err(Error::dim("linear_forward", "b", [o], b.shape()));
    }
    let rows = x.rows();
    let mut y = vec![0.0; rows * o];
    gemm(rows, i, o, 1.0, x.data(), Op::N, w.data(), Op::N, 0.0, &mut y);
    add_row_bias(&mut y, b.data());
    Tensor::from_vec(&[rows, o], y)
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_dense(format!("{name}.w"), input, output, rng);
        let b = store.add_zeros(format!("{name}.b"), &[output]);
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, store.value(self.w), store.value(self.b))
    }

    /// Single-row inference path.
    pub fn forward_row(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        let mut y = store.value(self.b).data().to_vec();
        let mut acc = vec![0.0; self.output];
        gemv_acc(x, store.value(self.w).data(), &mut acc);
        for (v, a) in y.iter_mut().zip(&acc) {
            *v += a;
        }
        y
    }

    /// Accumulates weight gradients (when wanted) and returns `dL/dx` if requested.
    pub fn backward(
        &self,
        store: &ParameterStore,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Tensor> {
        let rows = x.rows();
        debug_assert_eq!(dy.shape(), [rows, self.output]);
        if let Some(gw) = grads.slot_mut(self.w) {
            gemm(
                self.input,
                rows,
                self.output,
                1.0,
                x.data(),
                Op::T,
                dy.data(),
                Op::N,
                1.0,
                gw.data_mut(),
            );
        }
        if let Some(gb) = grads.slot_mut(self.b) {
            accumulate_col_sums(dy.data(), gb.data_mut());
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&[rows, self.input]);
            gemm(
                rows,
                self.output,
                self.input,
                1.0,
                dy.data(),
                Op::N,
                store.value(self.w).data(),
                Op::T,
                0.0,
                dx.data_mut(),
            );
            dx
        })
    }
}
