//! Teacher synthesis model: word encoder, style-token context network and an
//! autoregressive segment decoder with a stop head.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FrameOracle, Sentence, WordId, EOS};
use crate::error::{Error, Result};
use crate::lm::{sample_lookahead_with, LanguageModel, SamplerConfig};
use crate::nn::ops::{dot, gemm, softmax_in_place, softplus, Op};
use crate::nn::{
    bce_stop_loss, masked_mean, masked_mean_backward, mse_loss, AdamConfig, AdamState, Blstm,
    Checkpoint, Embedding, Gradients, Linear, Lstm, LstmState, ParamId, ParameterStore, Tensor,
};
use crate::seed;
use crate::train::{apply_step, batch_gradients, ChunkResult, GRAD_CHUNK};
use crate::segment::{make_training_windows, Window};

/// Architecture sizes; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherDims {
    pub word_dim: usize,
    /// Per direction; encoder outputs are twice this wide.
    pub encoder_hidden: usize,
    pub context_dim: usize,
    pub style_tokens: usize,
    pub decoder_hidden: usize,
    pub frame_dim: usize,
}

impl Default for TeacherDims {
    fn default() -> Self {
        TeacherDims {
            word_dim: 64,
            encoder_hidden: 64,
            context_dim: 256,
            style_tokens: 10,
            decoder_hidden: 256,
            frame_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    #[serde(flatten)]
    pub dims: TeacherDims,
    /// Iterations with ground-truth lookahead.
    pub phase1_iterations: usize,
    /// Fine-tuning iterations with LM-sampled lookahead.
    pub phase2_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Widest text window; every width from 1 up to this is used.
    pub window: usize,
    pub hop: usize,
    /// Probability of replacing the context embedding with zeros.
    pub context_dropout: f64,
    /// Probability of hiding the lookahead.
    pub future_dropout: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            dims: TeacherDims::default(),
            phase1_iterations: 1200,
            phase2_iterations: 120,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            window: 3,
            hop: 1,
            context_dropout: 0.1,
            future_dropout: 0.1,
        }
    }
}

/// Per-word encoder outputs `[len x 2H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub h: Tensor,
}

impl EncoderState {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    /// Mean over words.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.h.cols()];
        for r in 0..self.h.rows() {
            for (o, v) in out.iter_mut().zip(self.h.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.h.rows() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Frames and stop logits for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSegment {
    pub frames: Tensor,
    pub stop_logits: Vec<f64>,
    /// The frame cap was reached without a stop decision.
    pub runaway: bool,
}

impl FrameSegment {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct TeacherExample {
    pub past: Vec<WordId>,
    pub current: Vec<WordId>,
    pub future: Vec<WordId>,
    pub target: Tensor,
    pub stop: Vec<f64>,
    pub zero_context: bool,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub store: ParameterStore,
    pub dims: TeacherDims,
    pub vocab_len: usize,
    emb: Embedding,
    enc: Blstm,
    query: Linear,
    tokens: ParamId,
    dec: Lstm,
    frame_out: Linear,
    stop_out: Linear,
}

/// `[L_target]` = frame MSE + stop BCE with equal weights.
pub fn target_loss(pred: &FrameSegment, frames: &Tensor, flags: &[f64]) -> Result<f64> {
    if pred.stop_logits.len() != flags.len() {
        return Err(Error::dim("target_loss", "flags", pred.stop_logits.len(), flags.len()));
    }
    let logits = Tensor::vector(pred.stop_logits.clone());
    let flags = Tensor::vector(flags.to_vec());
    Ok(mse_loss(&pred.frames, frames)? + bce_stop_loss(&logits, &flags)?)
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let rows = a.rows();
    let mut out = Vec::with_capacity(rows * (a.cols() + b.cols()));
    for r in 0..rows {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Tensor::from_vec(&[rows, a.cols() + b.cols()], out).expect("shape")
}

fn split_cols(x: &Tensor, at: usize) -> (Tensor, Tensor) {
    let rows = x.rows();
    let rest = x.cols() - at;
    let mut a = Vec::with_capacity(rows * at);
    let mut b = Vec::with_capacity(rows * rest);
    for r in 0..rows {
        a.extend_from_slice(&x.row(r)[..at]);
        b.extend_from_slice(&x.row(r)[at..]);
    }
    (
        Tensor::from_vec(&[rows, at], a).expect("shape"),
        Tensor::from_vec(&[rows, rest], b).expect("shape"),
    )
}

fn take_rows(x: &Tensor, start: usize, n: usize) -> Tensor {
    let c = x.cols();
    Tensor::from_vec(&[n, c], x.data()[start * c..(start + n) * c].to_vec()).expect("shape")
}

/// Stable permutation putting the longest entries first. Length-sorted
/// batches let the LSTM skip finished rows.
fn longest_first(lens: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lens.len()).collect();
    idx.sort_by_key(|&i| std::cmp::Reverse(lens[i]));
    idx
}

/// Word sequences packed time-major for the encoder, longest first.
/// Row `i` of the packed batch holds `seqs[order[i]]`.
struct Packed {
    ids: Vec<WordId>,
    lengths: Vec<usize>,
    order: Vec<usize>,
    steps: usize,
}

fn pack(seqs: &[&[WordId]]) -> Packed {
    let order = longest_first(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>());
    let lengths: Vec<usize> = order.iter().map(|&i| seqs[i].len()).collect();
    let steps = lengths.first().copied().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(steps * seqs.len());
    for t in 0..steps {
        for &i in &order {
            ids.push(seqs[i].get(t).copied().unwrap_or(EOS));
        }
    }
    Packed {
        ids,
        lengths,
        order,
        steps,
    }
}

fn permute_rows(x: &Tensor, order: &[usize], inverse: bool) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for (i, &j) in order.iter().enumerate() {
        let (dst, src) = if inverse { (j, i) } else { (i, j) };
        out.row_mut(dst).copy_from_slice(x.row(src));
    }
    out
}

/// Attention of `e = softmax(q T^T / sqrt(C)) T` for a batch of queries.
struct Attention {
    alpha: Tensor,
    e: Tensor,
}

impl Teacher {
    pub fn new(vocab_len: usize, dims: TeacherDims, seed_value: u64) -> Self {
        let mut rng = seed::rng_for(seed_value, "teacher.init");
        let mut store = ParameterStore::new();
        let h2 = 2 * dims.encoder_hidden;
        let emb = Embedding::new(&mut store, "enc.emb", vocab_len, dims.word_dim, &mut rng);
        let enc = Blstm::new(&mut store, "enc.blstm", dims.word_dim, dims.encoder_hidden, &mut rng);
        let query = Linear::new(&mut store, "ctx.query", 2 * h2, dims.context_dim, &mut rng);
        let tokens = store.add_uniform("ctx.tokens", &[dims.style_tokens, dims.context_dim], 0.3, &mut rng);
        let dec = Lstm::new(
            &mut store,
            "dec.lstm",
            dims.frame_dim,
            dims.decoder_hidden,
            dims.context_dim + h2,
            &mut rng,
        );
        let frame_out = Linear::new(&mut store, "dec.frame", dims.decoder_hidden, dims.frame_dim, &mut rng);
        let stop_out = Linear::new(&mut store, "dec.stop", dims.decoder_hidden, 1, &mut rng);
        Teacher {
            store,
            dims,
            vocab_len,
            emb,
            enc,
            query,
            tokens,
            dec,
            frame_out,
            stop_out,
        }
    }

    pub fn context_dim(&self) -> usize {
        self.dims.context_dim
    }

    pub fn encoder_width(&self) -> usize {
        2 * self.dims.encoder_hidden
    }

    /// Embedding lookup followed by the BLSTM.
    pub fn encode(&self, words: &[WordId]) -> Result<EncoderState> {
        if words.is_empty() {
            return Err(Error::EmptyInput("Teacher::encode"));
        }
        let xs = self.emb.forward(&self.store, words)?;
        let trace = self.enc.forward(&self.store, &xs, &[words.len()])?;
        Ok(EncoderState { h: trace.outputs() })
    }

    /// Encodes `words`, or returns `None` for an empty sequence.
    pub fn encode_opt(&self, words: &[WordId]) -> Result<Option<EncoderState>> {
        if words.is_empty() {
            Ok(None)
        } else {
            self.encode(words).map(Some)
        }
    }

    fn summary(&self, s: Option<&EncoderState>) -> Vec<f64> {
        s.map(EncoderState::mean)
            .unwrap_or_else(|| vec![0.0; self.encoder_width()])
    }

    /// Attention weights over the style tokens for the given context.
    pub fn attention_weights(&self, past: Option<&EncoderState>, future: Option<&EncoderState>) -> Vec<f64> {
        let mut qin = self.summary(past);
        qin.extend(self.summary(future));
        let q = self.query.forward_row(&self.store, &qin);
        let tokens = self.store.value(self.tokens);
        let scale = 1.0 / (self.dims.context_dim as f64).sqrt();
        let mut scores: Vec<f64> = (0..tokens.rows()).map(|k| dot(&q, tokens.row(k)) * scale).collect();
        softmax_in_place(&mut scores);
        scores
    }

    /// `E(h_past, h_future)`: attention-weighted sum of style tokens.
    pub fn context_embed(&self, past: Option<&EncoderState>, future: Option<&EncoderState>) -> Vec<f64> {
        let alpha = self.attention_weights(past, future);
        let tokens = self.store.value(self.tokens);
        let mut e = vec![0.0; self.dims.context_dim];
        for (k, a) in alpha.iter().enumerate() {
            for (o, t) in e.iter_mut().zip(tokens.row(k)) {
                *o += a * t;
            }
        }
        e
    }

    /// Context embedding from raw word sequences (either may be empty).
    pub fn context_for(&self, past: &[WordId], future: &[WordId]) -> Result<Vec<f64>> {
        let p = self.encode_opt(past)?;
        let f = self.encode_opt(future)?;
        Ok(self.context_embed(p.as_ref(), f.as_ref()))
    }

    fn decoder_static(&self, current: &EncoderState, e: &[f64]) -> Result<Tensor> {
        if e.len() != self.dims.context_dim {
            return Err(Error::dim("decode_segment", "e", self.dims.context_dim, e.len()));
        }
        let mut s = e.to_vec();
        s.extend(current.mean());
        let s = Tensor::from_vec(&[1, s.len()], s)?;
        self.dec.static_gates(&self.store, &s)
    }

    fn decode_step(&self, prev: &[f64], state: &LstmState, sg: &Tensor) -> Result<(LstmState, Vec<f64>, f64)> {
        let x = Tensor::from_vec(&[1, self.dims.frame_dim], prev.to_vec())?;
        let next = self.dec.step(&self.store, &x, state, Some(sg));
        let frame = self.frame_out.forward_row(&self.store, next.h.data());
        let stop = self.stop_out.forward_row(&self.store, next.h.data())[0];
        Ok((next, frame, stop))
    }

    /// Free-running decode: stops after the first frame whose stop probability
    /// exceeds 0.5, or at `max_frames`.
    pub fn decode_segment(&self, current: &EncoderState, e: &[f64], max_frames: usize) -> Result<FrameSegment> {
        if current.is_empty() {
            return Err(Error::EmptyInput("decode_segment"));
        }
        if max_frames == 0 {
            return Err(Error::Config("max_frames must be >= 1".into()));
        }
        let sg = self.decoder_static(current, e)?;
        let d = self.dims.frame_dim;
        let mut state = LstmState::zeros(1, self.dims.decoder_hidden);
        let mut prev = vec![0.0; d];
        let mut frames = Vec::new();
        let mut stops = Vec::new();
        let mut stopped = false;
        while stops.len() < max_frames {
            let (next, frame, stop) = self.decode_step(&prev, &state, &sg)?;
            state = next;
            frames.extend_from_slice(&frame);
            stops.push(stop);
            prev = frame;
            if stop > 0.0 {
                stopped = true;
                break;
            }
        }
        let n = stops.len();
        let frames = Tensor::from_vec(&[n, d], frames)?;
        if !frames.is_finite() {
            return Err(Error::NonFinite("decode_segment"));
        }
        Ok(FrameSegment {
            frames,
            stop_logits: stops,
            runaway: !stopped,
        })
    }

    /// Teacher-forced decode: consumes the ground-truth previous frame at every
    /// step and emits exactly `target.rows()` frames.
    pub fn decode_forced(&self, current: &EncoderState, e: &[f64], target: &Tensor) -> Result<FrameSegment> {
        if current.is_empty() {
            return Err(Error::EmptyInput("decode_forced"));
        }
        if target.cols() != self.dims.frame_dim {
            return Err(Error::dim("decode_forced", "target", self.dims.frame_dim, target.cols()));
        }
        let sg = self.decoder_static(current, e)?;
        let d = self.dims.frame_dim;
        let mut state = LstmState::zeros(1, self.dims.decoder_hidden);
        let mut prev = vec![0.0; d];
        let mut frames = Vec::with_capacity(target.len());
        let mut stops = Vec::with_capacity(target.rows());
        for r in 0..target.rows() {
            let (next, frame, stop) = self.decode_step(&prev, &state, &sg)?;
            state = next;
            frames.extend_from_slice(&frame);
            stops.push(stop);
            prev = target.row(r).to_vec();
        }
        Ok(FrameSegment {
            frames: Tensor::from_vec(&[target.rows(), d], frames)?,
            stop_logits: stops,
            runaway: false,
        })
    }

    fn attention(&self, q: &Tensor) -> Attention {
        let tokens = self.store.value(self.tokens);
        let (b, k, c) = (q.rows(), tokens.rows(), tokens.cols());
        let mut scores = vec![0.0; b * k];
        gemm(b, c, k, 1.0 / (c as f64).sqrt(), q.data(), Op::N, tokens.data(), Op::T, 0.0, &mut scores);
        for row in scores.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let alpha = Tensor::from_vec(&[b, k], scores).expect("shape");
        let mut e = Tensor::zeros(&[b, c]);
        gemm(b, k, c, 1.0, alpha.data(), Op::N, tokens.data(), Op::N, 0.0, e.data_mut());
        Attention { alpha, e }
    }

    /// Summed per-example `L_target` over a teacher-forced batch, with
    /// gradients. Returns `(sum, examples)`.
    pub fn batch_loss(&self, batch: &[TeacherExample], grads: &mut Gradients) -> Result<(f64, usize)> {
        self.batch_loss_with_context(batch, None, grads).map(|(l, n, _)| (l, n))
    }

    /// As [`Teacher::batch_loss`], optionally with externally supplied context
    /// embeddings `[B x C]` in place of `E(.)`. In that case the gradient with
    /// respect to them is returned.
    pub fn batch_loss_with_context(
        &self,
        batch: &[TeacherExample],
        external: Option<&Tensor>,
        grads: &mut Gradients,
    ) -> Result<(f64, usize, Option<Tensor>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyInput("Teacher::batch_loss"));
        }
        let order = longest_first(&batch.iter().map(|ex| ex.target.rows()).collect::<Vec<_>>());
        if order.iter().enumerate().any(|(i, &j)| i != j) {
            let sorted: Vec<TeacherExample> = order.iter().map(|&i| batch[i].clone()).collect();
            let ext = external.map(|e| permute_rows(e, &order, false));
            let (loss, n, d_ext) = self.batch_loss_with_context(&sorted, ext.as_ref(), grads)?;
            return Ok((loss, n, d_ext.map(|d| permute_rows(&d, &order, true))));
        }
        let dims = &self.dims;
        let (h2, c, d) = (self.encoder_width(), dims.context_dim, dims.frame_dim);
        for ex in batch {
            if ex.current.is_empty() {
                return Err(Error::EmptyInput("TeacherExample::current"));
            }
            if ex.target.cols() != d || ex.target.rows() != ex.stop.len() || ex.target.rows() == 0 {
                return Err(Error::dim("Teacher::batch_loss", "target", [ex.stop.len(), d], ex.target.shape()));
            }
        }
        if let Some(ext) = external {
            if ext.shape() != [b, c] {
                return Err(Error::dim("Teacher::batch_loss", "context", [b, c], ext.shape()));
            }
        }

        // Encoder over [past; current; future] as one 3B batch (only current
        // when the context is supplied externally).
        let groups = if external.is_some() { 1 } else { 3 };
        let mut seqs: Vec<&[WordId]> = Vec::with_capacity(groups * b);
        if external.is_none() {
            seqs.extend(batch.iter().map(|ex| ex.past.as_slice()));
        }
        seqs.extend(batch.iter().map(|ex| ex.current.as_slice()));
        if external.is_none() {
            seqs.extend(batch.iter().map(|ex| ex.future.as_slice()));
        }
        let packed = pack(&seqs);
        let xs = self.emb.forward(&self.store, &packed.ids)?;
        let enc_trace = self.enc.forward(&self.store, &xs, &packed.lengths)?;
        let enc_out = enc_trace.outputs();
        let pooled = permute_rows(
            &masked_mean(&enc_out, groups * b, &packed.lengths),
            &packed.order,
            true,
        );
        let cur_off = if external.is_some() { 0 } else { b };
        let sc = take_rows(&pooled, cur_off, b);

        let (qin, att) = if external.is_none() {
            let sp = take_rows(&pooled, 0, b);
            let sf = take_rows(&pooled, 2 * b, b);
            let qin = concat_cols(&sp, &sf);
            let q = self.query.forward(&self.store, &qin)?;
            let att = self.attention(&q);
            (Some((qin, q)), Some(att))
        } else {
            (None, None)
        };
        let mut e = match (&att, external) {
            (Some(a), _) => a.e.clone(),
            (None, Some(ext)) => ext.clone(),
            _ => unreachable!(),
        };
        for (r, ex) in batch.iter().enumerate() {
            if ex.zero_context {
                e.row_mut(r).fill(0.0);
            }
        }
        let stat = concat_cols(&e, &sc);

        // Teacher-forced decoder.
        let f_len: Vec<usize> = batch.iter().map(|ex| ex.target.rows()).collect();
        let steps = *f_len.iter().max().expect("nonempty");
        let mut xd = Tensor::zeros(&[steps * b, d]);
        for t in 1..steps {
            for (r, ex) in batch.iter().enumerate() {
                if t < f_len[r] {
                    xd.row_mut(t * b + r).copy_from_slice(ex.target.row(t - 1));
                }
            }
        }
        let dtrace = self.dec.forward(&self.store, &xd, &f_len, Some(&stat), false)?;
        let frames = self.frame_out.forward(&self.store, &dtrace.hs)?;
        let stops = self.stop_out.forward(&self.store, &dtrace.hs)?;

        let mut loss = 0.0;
        let mut d_frames = Tensor::zeros(&[steps * b, d]);
        let mut d_stops = Tensor::zeros(&[steps * b, 1]);
        for (r, ex) in batch.iter().enumerate() {
            let f = f_len[r] as f64;
            let (mut mse, mut bce) = (0.0, 0.0);
            for t in 0..f_len[r] {
                let row = t * b + r;
                let y = ex.target.row(t);
                let dr = d_frames.row_mut(row);
                for ((g, p), yv) in dr.iter_mut().zip(frames.row(row)).zip(y) {
                    let diff = p - yv;
                    mse += diff * diff;
                    *g = 2.0 * diff / (f * d as f64);
                }
                let z = stops.data()[row];
                let flag = ex.stop[t];
                bce += softplus(z) - flag * z;
                d_stops.data_mut()[row] = (crate::nn::ops::sigmoid(z) - flag) / f;
            }
            loss += mse / (f * d as f64) + bce / f;
        }

        let mut d_h = self
            .frame_out
            .backward(&self.store, &dtrace.hs, &d_frames, grads, true)
            .expect("dx");
        let d_h2 = self
            .stop_out
            .backward(&self.store, &dtrace.hs, &d_stops, grads, true)
            .expect("dx");
        d_h.add_assign(&d_h2)?;
        let dgrads = self.dec.backward(&self.store, &dtrace, &d_h, grads, false, true);
        let d_stat = dgrads.d_static.expect("static gradient");
        let (mut d_e, d_sc) = split_cols(&d_stat, c);
        for (r, ex) in batch.iter().enumerate() {
            if ex.zero_context {
                d_e.row_mut(r).fill(0.0);
            }
        }

        let mut d_pooled = Tensor::zeros(&[groups * b, h2]);
        for r in 0..b {
            d_pooled.row_mut(cur_off + r).copy_from_slice(d_sc.row(r));
        }
        let d_external = if let (Some((qin, q)), Some(att)) = (&qin, &att) {
            let tokens = self.store.value(self.tokens);
            let k = tokens.rows();
            // e = alpha T
            let mut d_alpha = vec![0.0; b * k];
            gemm(b, c, k, 1.0, d_e.data(), Op::N, tokens.data(), Op::T, 0.0, &mut d_alpha);
            let mut d_scores = vec![0.0; b * k];
            for r in 0..b {
                let a = att.alpha.row(r);
                let da = &d_alpha[r * k..(r + 1) * k];
                let s: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for j in 0..k {
                    d_scores[r * k + j] = a[j] * (da[j] - s);
                }
            }
            let scale = 1.0 / (c as f64).sqrt();
            if let Some(gt) = grads.slot_mut(self.tokens) {
                gemm(k, b, c, 1.0, att.alpha.data(), Op::T, d_e.data(), Op::N, 1.0, gt.data_mut());
                gemm(k, b, c, scale, &d_scores, Op::T, q.data(), Op::N, 1.0, gt.data_mut());
            }
            let mut d_q = Tensor::zeros(&[b, c]);
            gemm(b, k, c, scale, &d_scores, Op::N, tokens.data(), Op::N, 0.0, d_q.data_mut());
            let d_qin = self
                .query
                .backward(&self.store, qin, &d_q, grads, true)
                .expect("dx");
            let (d_sp, d_sf) = split_cols(&d_qin, h2);
            for r in 0..b {
                d_pooled.row_mut(r).copy_from_slice(d_sp.row(r));
                d_pooled.row_mut(2 * b + r).copy_from_slice(d_sf.row(r));
            }
            None
        } else {
            Some(d_e)
        };

        let need_enc = grads.wants(self.emb.table)
            || grads.wants(self.enc.fwd.wx)
            || grads.wants(self.enc.bwd.wx)
            || grads.wants(self.enc.fwd.wh)
            || grads.wants(self.enc.bwd.wh);
        if need_enc {
            let d_sorted = permute_rows(&d_pooled, &packed.order, false);
            let d_out = masked_mean_backward(&d_sorted, packed.steps, &packed.lengths);
            let (d_f, d_b) = self.enc.split_grad(&d_out);
            let need_dx = grads.wants(self.emb.table);
            if let Some(dx) = self.enc.backward(&self.store, &enc_trace, &d_f, &d_b, grads, need_dx) {
                self.emb.backward(&packed.ids, &dx, grads);
            }
        }
        Ok((loss, b, d_external))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "teacher".into());
        meta.insert("vocab_len".into(), self.vocab_len.to_string());
        meta.insert(
            "dims".into(),
            serde_json::to_string(&self.dims).expect("serializable"),
        );
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "teacher" {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: "not a teacher checkpoint".into(),
            });
        }
        let dims: TeacherDims = serde_json::from_str(ck.meta_str("dims")?).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: format!("bad teacher dims: {e}"),
        })?;
        let mut t = Teacher::new(ck.meta_parse("vocab_len")?, dims, 0);
        ck.restore_into(&mut t.store)?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean training loss per iteration for both phases.
#[derive(Clone, Debug, Default)]
pub struct TeacherTrainLog {
    pub phase1: Vec<f64>,
    pub phase2: Vec<f64>,
}

/// Lookahead source used while building training examples.
pub enum Lookahead<'a> {
    /// True future, cut at a random length of at least `max_len` words.
    Truth { max_len: usize },
    Sampled { lm: &'a LanguageModel, sampler: &'a SamplerConfig },
}

/// Every window of every width `1..=window` over the corpus.
pub fn window_pool(sentences: &[Sentence], window: usize, hop: usize) -> Vec<(usize, Window)> {
    let mut pool = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        for w in 1..=window {
            for win in make_training_windows(s, w, hop) {
                pool.push((i, win));
            }
        }
    }
    pool
}

/// Builds one training example for `window` of `s`.
#[allow(clippy::too_many_arguments)]
pub fn build_example<R: Rng>(
    s: &Sentence,
    win: &Window,
    oracle: &FrameOracle,
    lookahead: &Lookahead<'_>,
    context_dropout: f64,
    future_dropout: f64,
    rng: &mut R,
) -> Result<TeacherExample> {
    let words = s.words();
    let past = words[..win.start].to_vec();
    let current = words[win.start..win.end].to_vec();
    let rest = &words[win.end..];
    let mut future = match lookahead {
        Lookahead::Truth { max_len } => {
            if rest.len() <= *max_len {
                rest.to_vec()
            } else {
                let k = rng.random_range(*max_len..=rest.len());
                rest[..k].to_vec()
            }
        }
        Lookahead::Sampled { lm, sampler } => sample_lookahead_with(lm, &words[..win.end], sampler, rng)?,
    };
    if rng.random::<f64>() < future_dropout {
        future.clear();
    }
    let zero_context = rng.random::<f64>() < context_dropout;
    let target = oracle.frames(s)?;
    let (frames, stop) = target.segment(win.start, win.end - win.start);
    Ok(TeacherExample {
        past,
        current,
        future,
        target: frames,
        stop,
        zero_context,
    })
}

/// Two-phase teacher training: ground-truth lookahead, then LM-sampled
/// lookahead (phase 2 needs `lm`).
#[allow(clippy::too_many_arguments)]
pub fn train_teacher(
    train: &[Sentence],
    vocab_len: usize,
    oracle: &FrameOracle,
    lm: Option<&LanguageModel>,
    cfg: &TeacherConfig,
    sampler: &SamplerConfig,
    adam: &AdamConfig,
    seed_value: u64,
) -> Result<(Teacher, TeacherTrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("train_teacher"));
    }
    if cfg.dims.frame_dim != oracle.dim {
        return Err(Error::Config(format!(
            "teacher frame_dim {} differs from oracle dim {}",
            cfg.dims.frame_dim, oracle.dim
        )));
    }
    if cfg.phase2_iterations > 0 && lm.is_none() {
        return Err(Error::Config("phase-2 teacher training needs a language model".into()));
    }
    if cfg.batch_size == 0 || cfg.window == 0 || cfg.hop == 0 {
        return Err(Error::Config("teacher batch_size, window and hop must be >= 1".into()));
    }
    let mut teacher = Teacher::new(vocab_len, cfg.dims.clone(), seed_value);
    let mut opt = AdamState::new(
        &teacher.store,
        AdamConfig {
            lr: cfg.learning_rate,
            ..*adam
        },
    );
    let pool = window_pool(train, cfg.window, cfg.hop);
    let mut log = TeacherTrainLog::default();
    let total = cfg.phase1_iterations + cfg.phase2_iterations;
    let truth = Lookahead::Truth {
        max_len: sampler.max_len,
    };
    for it in 0..total {
        let phase2 = it >= cfg.phase1_iterations;
        let sampled;
        let lookahead = if phase2 {
            sampled = Lookahead::Sampled {
                lm: lm.expect("checked above"),
                sampler,
            };
            &sampled
        } else {
            &truth
        };
        let mut rng = seed::item_rng(seed_value, "teacher.batch", it as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (si, win) = &pool[rng.random_range(0..pool.len())];
            batch.push(build_example(
                &train[*si],
                win,
                oracle,
                lookahead,
                cfg.context_dropout,
                cfg.future_dropout,
                &mut rng,
            )?);
        }
        let model = &teacher;
        let r = batch_gradients(&batch, GRAD_CHUNK, |chunk| {
            let mut g = Gradients::for_store(&model.store);
            let (loss_sum, count) = model.batch_loss(chunk, &mut g)?;
            Ok(ChunkResult {
                grads: g,
                loss_sum,
                count,
            })
        })?;
        let loss = apply_step(&mut teacher.store, &mut opt, r, cfg.grad_clip, it)?;
        if phase2 {
            log.phase2.push(loss);
        } else {
            log.phase1.push(loss);
        }
    }
    Ok((teacher, log))
}
