//! Unidirectional and bidirectional LSTM layers with hand-written BPTT.
//!
//! Gate layout along the `4H` axis is `[input | forget | candidate | output]`.
//! Batched sequences are time-major (`[T*B x I]`, row `t*B + b`) and carry a
//! per-row length; positions past a row's length leave its state untouched.

use rand::Rng;

use super::ops::{accumulate_col_sums, add_row_bias, gemm, gemv_acc, matmul_acc, sigmoid, Op};
use super::{Gradients, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Borrowed gate weights of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'a> {
    /// `[I x 4H]`
    pub wx: &'a Tensor,
    /// `[H x 4H]`
    pub wh: &'a Tensor,
    /// `[4H]`
    pub b: &'a Tensor,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.wh.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.wx.shape()[0]
    }
}

/// Recurrent state `(h, c)`, each `[B x H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// Applies the gate nonlinearities to one row of pre-activations and updates
/// the cell. `acts` receives the post-activation gates.
#[inline]
fn cell_update(gates: &[f64], c_prev: &[f64], h: &mut [f64], c: &mut [f64], acts: &mut [f64]) {
    let hd = c_prev.len();
    for j in 0..hd {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hd + j]);
        let g = gates[2 * hd + j].tanh();
        let o = sigmoid(gates[3 * hd + j]);
        let cn = f * c_prev[j] + i * g;
        c[j] = cn;
        h[j] = o * cn.tanh();
        acts[j] = i;
        acts[hd + j] = f;
        acts[2 * hd + j] = g;
        acts[3 * hd + j] = o;
    }
}

/// One LSTM step on a batch: returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: LstmWeights<'_>,
) -> Result<(Tensor, Tensor)> {
    let (inp, hd) = (params.input(), params.hidden());
    let batch = x_t.rows();
    if x_t.shape() != [batch, inp] {
        return Err(Error::dim("lstm_cell_step", "x_t", [batch, inp], x_t.shape()));
    }
    if h_prev.shape() != [batch, hd] {
        return Err(Error::dim("lstm_cell_step", "h_prev", [batch, hd], h_prev.shape()));
    }
    if c_prev.shape() != [batch, hd] {
        return Err(Error::dim("lstm_cell_step", "c_prev", [batch, hd], c_prev.shape()));
    }
    if params.wh.shape() != [hd, 4 * hd] {
        return Err(Error::dim("lstm_cell_step", "wh", [hd, 4 * hd], params.wh.shape()));
    }
    if params.b.shape() != [4 * hd] {
        return Err(Error::dim("lstm_cell_step", "b", [4 * hd], params.b.shape()));
    }
    if !(x_t.is_finite() && h_prev.is_finite() && c_prev.is_finite()) {
        return Err(Error::NonFinite("lstm_cell_step"));
    }
    let mut gates = vec![0.0; batch * 4 * hd];
    matmul_acc(batch, inp, 4 * hd, x_t.data(), params.wx.data(), &mut gates);
    add_row_bias(&mut gates, params.b.data());
    matmul_acc(batch, hd, 4 * hd, h_prev.data(), params.wh.data(), &mut gates);
    let mut h = Tensor::zeros(&[batch, hd]);
    let mut c = Tensor::zeros(&[batch, hd]);
    let mut acts = vec![0.0; 4 * hd];
    for r in 0..batch {
        cell_update(
            &gates[r * 4 * hd..(r + 1) * 4 * hd],
            c_prev.row(r),
            h.row_mut(r),
            c.row_mut(r),
            &mut acts,
        );
    }
    Ok((h, c))
}

/// Single-direction LSTM with an optional per-sequence static input that is
/// added to the gates at every step.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub ws: Option<ParamId>,
    pub input: usize,
    pub hidden: usize,
    pub static_dim: usize,
}

/// Everything the backward pass needs from a forward run.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    pub steps: usize,
    pub batch: usize,
    pub reverse: bool,
    /// State after processing each position, `[T*B x H]`.
    pub hs: Tensor,
    lengths: Vec<usize>,
    extent: Vec<usize>,
    input: TraceInput,
    static_in: Option<Tensor>,
    acts: Vec<f64>,
    cs: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
}

impl LstmTrace {
    /// State after the last processed position (the last valid word for the
    /// forward direction, the first word for the reverse direction).
    pub fn final_h(&self) -> Tensor {
        let t = if self.reverse { 0 } else { self.steps - 1 };
        let hd = self.hs.cols();
        let start = t * self.batch * hd;
        Tensor::from_vec(
            &[self.batch, hd],
            self.hs.data()[start..start + self.batch * hd].to_vec(),
        )
        .expect("shape")
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn active(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }
}

/// What the input projection was computed from, kept for the `W_x` gradient.
#[derive(Clone, Debug)]
enum TraceInput {
    Dense(Tensor),
    /// Rows of a fixed `[V x I]` table picked by id, one id per position.
    Table { table: Tensor, ids: Vec<usize> },
}

/// Rows of each time block that enter the matrix products: the active prefix
/// when lengths are non-increasing, otherwise the whole batch.
fn row_extent(lengths: &[usize], steps: usize) -> Vec<usize> {
    let sorted = lengths.windows(2).all(|w| w[0] >= w[1]);
    (0..steps)
        .map(|t| {
            if sorted {
                lengths.iter().take_while(|&&l| l > t).count()
            } else {
                lengths.len()
            }
        })
        .collect()
}

/// Concatenates the leading `extent[t]` rows of every time block.
fn gather_blocks(data: &[f64], width: usize, batch: usize, extent: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(extent.iter().sum::<usize>() * width);
    for (t, &m) in extent.iter().enumerate() {
        let r0 = t * batch;
        out.extend_from_slice(&data[r0 * width..(r0 + m) * width]);
    }
    out
}

/// Gradients flowing out of [`Lstm::backward`].
#[derive(Clone, Debug, Default)]
pub struct LstmInputGrads {
    pub dx: Option<Tensor>,
    pub d_static: Option<Tensor>,
}

impl Lstm {
    /// Recurrent and input weights are uniform in `±0.08`, biases zero except
    /// the forget gate which starts at 1.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        static_dim: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.add_uniform(format!("{name}.wx"), &[input, 4 * hidden], 0.08, rng);
        let wh = store.add_uniform(format!("{name}.wh"), &[hidden, 4 * hidden], 0.08, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias, true);
        let ws = (static_dim > 0).then(|| {
            store.add_uniform(format!("{name}.ws"), &[static_dim, 4 * hidden], 0.08, rng)
        });
        Lstm {
            wx,
            wh,
            b,
            ws,
            input,
            hidden,
            static_dim,
        }
    }

    pub fn param_count(input: usize, hidden: usize, static_dim: usize) -> usize {
        4 * hidden * (input + hidden + static_dim + 1)
    }

    pub fn weights<'a>(&self, store: &'a ParameterStore) -> LstmWeights<'a> {
        LstmWeights {
            wx: store.value(self.wx),
            wh: store.value(self.wh),
            b: store.value(self.b),
        }
    }

    /// Static contribution `s W_s` to the gate pre-activations, `[B x 4H]`.
    pub fn static_gates(&self, store: &ParameterStore, s: &Tensor) -> Result<Tensor> {
        let ws = self
            .ws
            .ok_or_else(|| Error::Config("LSTM has no static input".into()))?;
        if s.cols() != self.static_dim {
            return Err(Error::dim("Lstm::static_gates", "s", self.static_dim, s.cols()));
        }
        let mut out = Tensor::zeros(&[s.rows(), 4 * self.hidden]);
        matmul_acc(
            s.rows(),
            self.static_dim,
            4 * self.hidden,
            s.data(),
            store.value(ws).data(),
            out.data_mut(),
        );
        Ok(out)
    }

    /// Runs the whole padded batch. `xs` is `[T*B x I]` time-major.
    pub fn forward(
        &self,
        store: &ParameterStore,
        xs: &Tensor,
        lengths: &[usize],
        static_in: Option<&Tensor>,
        reverse: bool,
    ) -> Result<LstmTrace> {
        let batch = lengths.len();
        let hd = self.hidden;
        let g4 = 4 * hd;
        if batch == 0 || !xs.rows().is_multiple_of(batch) || xs.cols() != self.input {
            return Err(Error::dim(
                "Lstm::forward",
                "xs",
                format!("[T*{batch} x {}]", self.input),
                xs.shape(),
            ));
        }
        let steps = xs.rows() / batch;
        if steps == 0 {
            return Err(Error::EmptyInput("Lstm::forward"));
        }
        if lengths.iter().any(|&l| l > steps) {
            return Err(Error::dim("Lstm::forward", "lengths", steps, lengths));
        }
        let n = steps * batch;
        let extent = row_extent(lengths, steps);
        let mut pre = vec![0.0; n * g4];
        let wx = store.value(self.wx).data();
        let inp = self.input;
        if batch == 1 {
            // Single sequences stay on the row kernel so inference matches `step`.
            for (x, p) in xs.data().chunks_exact(inp).zip(pre.chunks_exact_mut(g4)) {
                gemv_acc(x, wx, p);
            }
        } else if extent.iter().all(|&m| m == batch) {
            gemm(n, inp, g4, 1.0, xs.data(), Op::N, wx, Op::N, 0.0, &mut pre);
        } else {
            for (t, &m) in extent.iter().enumerate() {
                let r0 = t * batch;
                if m > 0 {
                    gemm(m, inp, g4, 1.0, &xs.data()[r0 * inp..(r0 + m) * inp], Op::N, wx, Op::N, 0.0, &mut pre[r0 * g4..(r0 + m) * g4]);
                }
            }
        }
        self.recur(store, pre, lengths, extent, TraceInput::Dense(xs.clone()), static_in, reverse)
    }

    /// Like [`Lstm::forward`] with `xs[r] = table[ids[r]]`. The input
    /// projection is computed once per table row instead of once per position.
    pub fn forward_table(
        &self,
        store: &ParameterStore,
        table: &Tensor,
        ids: &[usize],
        lengths: &[usize],
        reverse: bool,
    ) -> Result<LstmTrace> {
        let batch = lengths.len();
        let g4 = 4 * self.hidden;
        if table.cols() != self.input {
            return Err(Error::dim("Lstm::forward_table", "table", self.input, table.cols()));
        }
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::dim("Lstm::forward_table", "ids", format!("T*{batch}"), ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::dim("Lstm::forward_table", "ids", table.rows(), bad));
        }
        let steps = ids.len() / batch;
        if lengths.iter().any(|&l| l > steps) {
            return Err(Error::dim("Lstm::forward_table", "lengths", steps, lengths));
        }
        let v = table.rows();
        let mut proj = vec![0.0; v * g4];
        gemm(v, self.input, g4, 1.0, table.data(), Op::N, store.value(self.wx).data(), Op::N, 0.0, &mut proj);
        let mut pre = Vec::with_capacity(ids.len() * g4);
        for &id in ids {
            pre.extend_from_slice(&proj[id * g4..(id + 1) * g4]);
        }
        let extent = row_extent(lengths, steps);
        let input = TraceInput::Table {
            table: table.clone(),
            ids: ids.to_vec(),
        };
        self.recur(store, pre, lengths, extent, input, None, reverse)
    }

    #[allow(clippy::too_many_arguments)]
    fn recur(
        &self,
        store: &ParameterStore,
        mut pre: Vec<f64>,
        lengths: &[usize],
        extent: Vec<usize>,
        input: TraceInput,
        static_in: Option<&Tensor>,
        reverse: bool,
    ) -> Result<LstmTrace> {
        let batch = lengths.len();
        let hd = self.hidden;
        let g4 = 4 * hd;
        let n = pre.len() / g4;
        let steps = n / batch;
        add_row_bias(&mut pre, store.value(self.b).data());
        if let Some(s) = static_in {
            let sg = self.static_gates(store, s)?;
            for block in pre.chunks_exact_mut(batch * g4) {
                for (a, b) in block.iter_mut().zip(sg.data()) {
                    *a += b;
                }
            }
        }

        let wh = store.value(self.wh).data();
        let mut h = vec![0.0; batch * hd];
        let mut c = vec![0.0; batch * hd];
        let mut hs = vec![0.0; n * hd];
        let mut cs = vec![0.0; n * hd];
        let mut h_prev = vec![0.0; n * hd];
        let mut c_prev = vec![0.0; n * hd];
        let mut acts = vec![0.0; n * g4];

        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for &t in &order {
            let blk = t * batch;
            let m = extent[t];
            let gates = &mut pre[blk * g4..(blk + batch) * g4];
            if m > 0 {
                matmul_acc(m, hd, g4, &h[..m * hd], wh, &mut gates[..m * g4]);
            }
            h_prev[blk * hd..(blk + batch) * hd].copy_from_slice(&h);
            c_prev[blk * hd..(blk + batch) * hd].copy_from_slice(&c);
            for (b, &len) in lengths.iter().enumerate() {
                if t >= len {
                    continue;
                }
                let row = blk + b;
                cell_update(
                    &gates[b * g4..(b + 1) * g4],
                    &c_prev[row * hd..(row + 1) * hd],
                    &mut h[b * hd..(b + 1) * hd],
                    &mut c[b * hd..(b + 1) * hd],
                    &mut acts[row * g4..(row + 1) * g4],
                );
            }
            hs[blk * hd..(blk + batch) * hd].copy_from_slice(&h);
            cs[blk * hd..(blk + batch) * hd].copy_from_slice(&c);
        }

        Ok(LstmTrace {
            steps,
            batch,
            reverse,
            hs: Tensor::from_vec(&[n, hd], hs)?,
            lengths: lengths.to_vec(),
            extent,
            input,
            static_in: static_in.cloned(),
            acts,
            cs,
            h_prev,
            c_prev,
        })
    }

    /// Backpropagates `d_hs` (gradient w.r.t. every entry of `trace.hs`).
    pub fn backward(
        &self,
        store: &ParameterStore,
        trace: &LstmTrace,
        d_hs: &Tensor,
        grads: &mut Gradients,
        need_dx: bool,
        need_d_static: bool,
    ) -> LstmInputGrads {
        let (batch, steps, hd) = (trace.batch, trace.steps, self.hidden);
        let g4 = 4 * hd;
        let n = steps * batch;
        debug_assert_eq!(d_hs.shape(), [n, hd]);
        let wh = store.value(self.wh).data();
        let mut dg = vec![0.0; n * g4];
        let mut dh = vec![0.0; batch * hd];
        let mut dc = vec![0.0; batch * hd];
        let mut dh_next = vec![0.0; batch * hd];

        let order: Vec<usize> = if trace.reverse {
            (0..steps).collect()
        } else {
            (0..steps).rev().collect()
        };
        for &t in &order {
            let blk = t * batch;
            for (a, b) in dh.iter_mut().zip(&d_hs.data()[blk * hd..(blk + batch) * hd]) {
                *a += b;
            }
            for b in 0..batch {
                if !trace.active(t, b) {
                    continue;
                }
                let row = blk + b;
                let acts = &trace.acts[row * g4..(row + 1) * g4];
                let c_t = &trace.cs[row * hd..(row + 1) * hd];
                let c_p = &trace.c_prev[row * hd..(row + 1) * hd];
                let dgr = &mut dg[row * g4..(row + 1) * g4];
                for j in 0..hd {
                    let (i, f, g, o) = (acts[j], acts[hd + j], acts[2 * hd + j], acts[3 * hd + j]);
                    let tc = c_t[j].tanh();
                    let dhj = dh[b * hd + j];
                    let d_o = dhj * tc;
                    let dct = dc[b * hd + j] + dhj * o * (1.0 - tc * tc);
                    dgr[j] = dct * g * i * (1.0 - i);
                    dgr[hd + j] = dct * c_p[j] * f * (1.0 - f);
                    dgr[2 * hd + j] = dct * i * (1.0 - g * g);
                    dgr[3 * hd + j] = d_o * o * (1.0 - o);
                    dc[b * hd + j] = dct * f;
                }
            }
            let m = trace.extent[t];
            if m > 0 {
                gemm(m, g4, hd, 1.0, &dg[blk * g4..(blk + m) * g4], Op::N, wh, Op::T, 0.0, &mut dh_next[..m * hd]);
            }
            for b in 0..batch {
                if trace.active(t, b) {
                    dh[b * hd..(b + 1) * hd].copy_from_slice(&dh_next[b * hd..(b + 1) * hd]);
                }
            }
        }

        // Weight gradients only need the rows that took part in the products.
        let rows: usize = trace.extent.iter().sum();
        let compact = rows < n;
        let dg_c = if compact {
            gather_blocks(&dg, g4, batch, &trace.extent)
        } else {
            Vec::new()
        };
        let dg_rows: &[f64] = if compact { &dg_c } else { &dg };
        if let Some(gwx) = grads.slot_mut(self.wx) {
            match &trace.input {
                TraceInput::Dense(x) => {
                    let x_c;
                    let xs: &[f64] = if compact {
                        x_c = gather_blocks(x.data(), self.input, batch, &trace.extent);
                        &x_c
                    } else {
                        x.data()
                    };
                    gemm(self.input, rows, g4, 1.0, xs, Op::T, dg_rows, Op::N, 1.0, gwx.data_mut());
                }
                TraceInput::Table { table, ids } => {
                    // Inactive rows of `dg` are zero, so summing every row is exact.
                    let v = table.rows();
                    let mut by_id = vec![0.0; v * g4];
                    for (&id, row) in ids.iter().zip(dg.chunks_exact(g4)) {
                        for (a, b) in by_id[id * g4..(id + 1) * g4].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    gemm(self.input, v, g4, 1.0, table.data(), Op::T, &by_id, Op::N, 1.0, gwx.data_mut());
                }
            }
        }
        if let Some(gwh) = grads.slot_mut(self.wh) {
            let h_c;
            let hp: &[f64] = if compact {
                h_c = gather_blocks(&trace.h_prev, hd, batch, &trace.extent);
                &h_c
            } else {
                &trace.h_prev
            };
            gemm(hd, rows, g4, 1.0, hp, Op::T, dg_rows, Op::N, 1.0, gwh.data_mut());
        }
        if let Some(gb) = grads.slot_mut(self.b) {
            accumulate_col_sums(&dg, gb.data_mut());
        }

        let mut out = LstmInputGrads::default();
        if let (Some(ws), Some(s)) = (self.ws, trace.static_in.as_ref()) {
            let mut dg_sum = vec![0.0; batch * g4];
            for block in dg.chunks_exact(batch * g4) {
                for (a, b) in dg_sum.iter_mut().zip(block) {
                    *a += b;
                }
            }
            if let Some(gws) = grads.slot_mut(ws) {
                gemm(self.static_dim, batch, g4, 1.0, s.data(), Op::T, &dg_sum, Op::N, 1.0, gws.data_mut());
            }
            if need_d_static {
                let mut ds = Tensor::zeros(&[batch, self.static_dim]);
                gemm(batch, g4, self.static_dim, 1.0, &dg_sum, Op::N, store.value(ws).data(), Op::T, 0.0, ds.data_mut());
                out.d_static = Some(ds);
            }
        }
        if need_dx {
            let inp = self.input;
            let wx = store.value(self.wx).data();
            let mut dx = Tensor::zeros(&[n, inp]);
            if compact {
                let mut dx_c = vec![0.0; rows * inp];
                gemm(rows, g4, inp, 1.0, dg_rows, Op::N, wx, Op::T, 0.0, &mut dx_c);
                let mut off = 0;
                for (t, &m) in trace.extent.iter().enumerate() {
                    let r0 = t * batch;
                    dx.data_mut()[r0 * inp..(r0 + m) * inp].copy_from_slice(&dx_c[off..off + m * inp]);
                    off += m * inp;
                }
            } else {
                gemm(n, g4, inp, 1.0, &dg, Op::N, wx, Op::T, 0.0, dx.data_mut());
            }
            out.dx = Some(dx);
        }
        out
    }

    /// One inference step for a fully active batch. `static_gates` comes from
    /// [`Lstm::static_gates`] and is reused across steps.
    pub fn step(
        &self,
        store: &ParameterStore,
        x: &Tensor,
        state: &LstmState,
        static_gates: Option<&Tensor>,
    ) -> LstmState {
        let batch = x.rows();
        let hd = self.hidden;
        let g4 = 4 * hd;
        let mut gates = vec![0.0; batch * g4];
        matmul_acc(batch, self.input, g4, x.data(), store.value(self.wx).data(), &mut gates);
        add_row_bias(&mut gates, store.value(self.b).data());
        if let Some(sg) = static_gates {
            for (a, b) in gates.iter_mut().zip(sg.data()) {
                *a += b;
            }
        }
        matmul_acc(batch, hd, g4, state.h.data(), store.value(self.wh).data(), &mut gates);
        let mut next = LstmState::zeros(batch, hd);
        let mut acts = vec![0.0; g4];
        for r in 0..batch {
            cell_update(
                &gates[r * g4..(r + 1) * g4],
                state.c.row(r),
                next.h.row_mut(r),
                next.c.row_mut(r),
                &mut acts,
            );
        }
        next
    }
}

/// Forward and reverse LSTMs over the same sequence.
#[derive(Clone, Debug)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Clone, Debug)]
pub struct BlstmTrace {
    pub fwd: LstmTrace,
    pub bwd: LstmTrace,
}

impl BlstmTrace {
    /// Per-position outputs `[fwd_h ‖ bwd_h]`, `[T*B x 2H]`.
    pub fn outputs(&self) -> Tensor {
        let (hf, hb) = (self.fwd.hs.cols(), self.bwd.hs.cols());
        let n = self.fwd.hs.rows();
        let mut out = Vec::with_capacity(n * (hf + hb));
        for r in 0..n {
            out.extend_from_slice(self.fwd.hs.row(r));
            out.extend_from_slice(self.bwd.hs.row(r));
        }
        Tensor::from_vec(&[n, hf + hb], out).expect("shape")
    }

    /// Forward direction's state at the last valid position.
    pub fn forward_last(&self) -> Tensor {
        self.fwd.final_h()
    }

    /// Backward direction's state at the first position.
    pub fn backward_first(&self) -> Tensor {
        self.bwd.final_h()
    }
}

impl Blstm {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Blstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, 0, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, 0, rng),
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * Lstm::param_count(input, hidden, 0)
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward(&self, store: &ParameterStore, xs: &Tensor, lengths: &[usize]) -> Result<BlstmTrace> {
        if xs.rows() == 0 {
            return Err(Error::EmptyInput("blstm_forward"));
        }
        Ok(BlstmTrace {
            fwd: self.fwd.forward(store, xs, lengths, None, false)?,
            bwd: self.bwd.forward(store, xs, lengths, None, true)?,
        })
    }

    /// [`Blstm::forward`] over `table` rows picked by `ids` (time-major).
    pub fn forward_table(
        &self,
        store: &ParameterStore,
        table: &Tensor,
        ids: &[usize],
        lengths: &[usize],
    ) -> Result<BlstmTrace> {
        Ok(BlstmTrace {
            fwd: self.fwd.forward_table(store, table, ids, lengths, false)?,
            bwd: self.bwd.forward_table(store, table, ids, lengths, true)?,
        })
    }

    /// `d_out` is the gradient w.r.t. [`BlstmTrace::outputs`]; boundary-state
    /// gradients can be folded in by the caller at the matching positions.
    pub fn backward(
        &self,
        store: &ParameterStore,
        trace: &BlstmTrace,
        d_fwd: &Tensor,
        d_bwd: &Tensor,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Tensor> {
        let a = self.fwd.backward(store, &trace.fwd, d_fwd, grads, need_dx, false);
        let b = self.bwd.backward(store, &trace.bwd, d_bwd, grads, need_dx, false);
        match (a.dx, b.dx) {
            (Some(mut x), Some(y)) => {
                x.add_assign(&y).expect("same shape");
                Some(x)
            }
            _ => None,
        }
    }

    /// Splits a `[T*B x 2H]` gradient into per-direction halves.
    pub fn split_grad(&self, d_out: &Tensor) -> (Tensor, Tensor) {
        let (hf, hb) = (self.fwd.hidden, self.bwd.hidden);
        let n = d_out.rows();
        let mut f = Vec::with_capacity(n * hf);
        let mut b = Vec::with_capacity(n * hb);
        for r in 0..n {
            let row = d_out.row(r);
            f.extend_from_slice(&row[..hf]);
            b.extend_from_slice(&row[hf..]);
        }
        (
            Tensor::from_vec(&[n, hf], f).expect("shape"),
            Tensor::from_vec(&[n, hb], b).expect("shape"),
        )
    }
}

/// Single-sequence convenience wrapper returning per-step outputs
/// `[T x 2H]` plus `(forward_last, backward_first)` boundary states.
pub fn blstm_forward(
    store: &ParameterStore,
    blstm: &Blstm,
    x_seq: &[Tensor],
) -> Result<(Tensor, Tensor, Tensor)> {
    if x_seq.is_empty() {
        return Err(Error::EmptyInput("blstm_forward"));
    }
    let batch = x_seq[0].rows();
    let mut data = Vec::new();
    for x in x_seq {
        if x.rows() != batch || x.cols() != blstm.fwd.input {
            return Err(Error::dim("blstm_forward", "x_seq", [batch, blstm.fwd.input], x.shape()));
        }
        data.extend_from_slice(x.data());
    }
    let xs = Tensor::from_vec(&[x_seq.len() * batch, blstm.fwd.input], data)?;
    let lengths = vec![x_seq.len(); batch];
    let trace = blstm.forward(store, &xs, &lengths)?;
    Ok((trace.outputs(), trace.forward_last(), trace.backward_first()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_parameters_zero_state_give_zero() {
        let z4 = Tensor::zeros(&[4]);
        let wx = Tensor::zeros(&[3, 4]);
        let wh = Tensor::zeros(&[1, 4]);
        let w = LstmWeights { wx: &wx, wh: &wh, b: &z4 };
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let (h, c) = lstm_cell_step(&x, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), w).unwrap();
        assert_eq!(h.data(), &[0.0]);
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn pure_memory_configuration_keeps_cell() {
        // input gate -> 0, forget gate -> 1
        let b = Tensor::vector(vec![-1e3, 1e3, 0.0, 0.0]);
        let wx = Tensor::zeros(&[1, 4]);
        let wh = Tensor::zeros(&[1, 4]);
        let w = LstmWeights { wx: &wx, wh: &wh, b: &b };
        let c_prev = Tensor::from_rows(&[vec![0.37]]).unwrap();
        let (_, c) = lstm_cell_step(
            &Tensor::from_rows(&[vec![0.9]]).unwrap(),
            &Tensor::from_rows(&[vec![0.2]]).unwrap(),
            &c_prev,
            w,
        )
        .unwrap();
        assert_eq!(c.data(), c_prev.data());
    }

    #[test]
    fn two_unit_cell_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, 0, &mut rng);
        let w = lstm.weights(&store);
        let x = [0.3, -0.7, 1.1];
        let hp = [0.25, -0.4];
        let cp = [0.6, -0.1];
        let (h, c) = lstm_cell_step(
            &Tensor::from_rows(&[x.to_vec()]).unwrap(),
            &Tensor::from_rows(&[hp.to_vec()]).unwrap(),
            &Tensor::from_rows(&[cp.to_vec()]).unwrap(),
            w,
        )
        .unwrap();
        let hd = 2;
        let pre = |k: usize| -> f64 {
            let mut s = w.b.data()[k];
            for (p, xv) in x.iter().enumerate() {
                s += xv * w.wx.data()[p * 4 * hd + k];
            }
            for (p, hv) in hp.iter().enumerate() {
                s += hv * w.wh.data()[p * 4 * hd + k];
            }
            s
        };
        for j in 0..hd {
            let i = sig(pre(j));
            let f = sig(pre(hd + j));
            let g = pre(2 * hd + j).tanh();
            let o = sig(pre(3 * hd + j));
            let cj = f * cp[j] + i * g;
            let hj = o * cj.tanh();
            assert!((c.data()[j] - cj).abs() < 1e-14);
            assert!((h.data()[j] - hj).abs() < 1e-14);
        }
    }

    #[test]
    fn nonfinite_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let lstm = Lstm::new(&mut store, "l", 2, 2, 0, &mut rng);
        let x = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        let err = lstm_cell_step(&x, &z, &z, lstm.weights(&store)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn blstm_rejects_empty_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let bl = Blstm::new(&mut store, "b", 2, 3, &mut rng);
        assert!(matches!(
            blstm_forward(&store, &bl, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn blstm_length_one_boundary_states_share_the_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let bl = Blstm::new(&mut store, "b", 2, 3, &mut rng);
        let x = Tensor::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let (_, f_last, b_first) = blstm_forward(&store, &bl, &[x.clone()]).unwrap();
        let z = Tensor::zeros(&[1, 3]);
        let (hf, _) = lstm_cell_step(&x, &z, &z, bl.fwd.weights(&store)).unwrap();
        let (hb, _) = lstm_cell_step(&x, &z, &z, bl.bwd.weights(&store)).unwrap();
        assert_eq!(f_last, hf);
        assert_eq!(b_first, hb);
    }

    #[test]
    fn blstm_matches_manual_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let bl = Blstm::new(&mut store, "b", 3, 4, &mut rng);
        let xs: Vec<Tensor> = (0..3)
            .map(|t| {
                Tensor::from_rows(&[(0..3).map(|k| ((t * 3 + k) as f64 * 0.7).sin()).collect()])
                    .unwrap()
            })
            .collect();
        let (outs, f_last, b_first) = blstm_forward(&store, &bl, &xs).unwrap();
        let z = Tensor::zeros(&[1, 4]);
        let (mut h, mut c) = (z.clone(), z.clone());
        let mut fwd = Vec::new();
        for x in &xs {
            (h, c) = lstm_cell_step(x, &h, &c, bl.fwd.weights(&store)).unwrap();
            fwd.push(h.clone());
        }
        let (mut h, mut c) = (z.clone(), z);
        let mut bwd = vec![Tensor::zeros(&[1, 4]); 3];
        for t in (0..3).rev() {
            (h, c) = lstm_cell_step(&xs[t], &h, &c, bl.bwd.weights(&store)).unwrap();
            bwd[t] = h.clone();
        }
        for t in 0..3 {
            let row = outs.row(t);
            for j in 0..4 {
                assert!((row[j] - fwd[t].data()[j]).abs() < 1e-14);
                assert!((row[4 + j] - bwd[t].data()[j]).abs() < 1e-14);
            }
        }
        assert_eq!(&f_last, &fwd[2]);
        assert_eq!(&b_first, &bwd[0]);
    }

    #[test]
    fn reversing_input_swaps_direction_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let mut bl = Blstm::new(&mut store, "b", 2, 3, &mut rng);
        // Share weights so the two directions are the same function.
        bl.bwd = bl.fwd.clone();
        let xs: Vec<Tensor> = (0..4)
            .map(|t| Tensor::from_rows(&[vec![t as f64 * 0.3 - 0.5, (t as f64).cos()]]).unwrap())
            .collect();
        let mut rev = xs.clone();
        rev.reverse();
        let (a, _, _) = blstm_forward(&store, &bl, &xs).unwrap();
        let (b, _, _) = blstm_forward(&store, &bl, &rev).unwrap();
        for t in 0..4 {
            assert_eq!(&a.row(t)[..3], &b.row(3 - t)[3..]);
            assert_eq!(&a.row(t)[3..], &b.row(3 - t)[..3]);
        }
    }

    #[test]
    fn masked_rows_match_unpadded_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParameterStore::new();
        let bl = Blstm::new(&mut store, "b", 2, 3, &mut rng);
        // Row 0 has length 3, row 1 length 1; time-major layout.
        let seq0 = [[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]];
        let seq1 = [[-0.7, 0.8]];
        let mut data = Vec::new();
        for t in 0..3 {
            data.extend_from_slice(&seq0[t]);
            data.extend_from_slice(if t == 0 { &seq1[0] } else { &[9.0, 9.0] });
        }
        let xs = Tensor::from_vec(&[6, 2], data).unwrap();
        let trace = bl.forward(&store, &xs, &[3, 1]).unwrap();
        let single: Vec<Tensor> = seq1.iter().map(|r| Tensor::from_rows(&[r.to_vec()]).unwrap()).collect();
        let (_, f1, b1) = blstm_forward(&store, &bl, &single).unwrap();
        let fl = trace.forward_last();
        let bf = trace.backward_first();
        for j in 0..3 {
            assert!((fl.row(1)[j] - f1.data()[j]).abs() < 1e-14);
            assert!((bf.row(1)[j] - b1.data()[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn table_input_matches_dense_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let bl = Blstm::new(&mut store, "b", 3, 4, &mut rng);
        let mut table = Tensor::zeros(&[5, 3]);
        table.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        // Lengths 3, 2, 1; padded positions use id 0.
        let ids = [1, 4, 2, 3, 3, 0, 2, 0, 0];
        let lengths = [3, 2, 1];
        let mut xs = Vec::new();
        for &i in &ids {
            xs.extend_from_slice(table.row(i));
        }
        let xs = Tensor::from_vec(&[9, 3], xs).unwrap();
        let dense = bl.forward(&store, &xs, &lengths).unwrap();
        let tab = bl.forward_table(&store, &table, &ids, &lengths).unwrap();
        let close = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&dense.forward_last(), &tab.forward_last()));
        assert!(close(&dense.backward_first(), &tab.backward_first()));

        let mut d = Tensor::zeros(&[9, 4]);
        d.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.11).cos());
        let mut g_dense = Gradients::for_store(&store);
        let mut g_tab = Gradients::for_store(&store);
        bl.backward(&store, &dense, &d, &d, &mut g_dense, false);
        bl.backward(&store, &tab, &d, &d, &mut g_tab, false);
        for id in [bl.fwd.wx, bl.fwd.wh, bl.bwd.wx, bl.bwd.b] {
            assert!(close(g_dense.get(id).unwrap(), g_tab.get(id).unwrap()));
        }
    }
}
