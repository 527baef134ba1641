//! Word-level LSTM language model and pseudo-lookahead sampling.
//!
//! Sentences are modelled as `EOS w_1 ... w_M EOS`: the leading EOS doubles as
//! the start symbol and the trailing one is the prediction target that ends
//! the sentence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, WordId, EOS};
use crate::error::{Error, Result};
use crate::nn::ops::{log_sum_exp, softmax_in_place};
use crate::nn::{
    AdamConfig, AdamState, Checkpoint, Embedding, Gradients, Linear, Lstm, LstmState,
    ParameterStore, Tensor,
};
use crate::seed;
use crate::train::{apply_step, batch_gradients, ChunkResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 64,
            hidden: 128,
            iterations: 1000,
            batch_size: 32,
            learning_rate: 3e-3,
            grad_clip: 5.0,
        }
    }
}

/// Lookahead sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Maximum number of sampled words `L`.
    pub max_len: usize,
    pub temperature: f64,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_len: 5,
            temperature: 1.0,
            greedy: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::Config("sampler.max_len must be >= 1".into()));
        }
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(Error::Config("sampler.temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Stacked LSTM layers that run alongside every LM step and whose outputs are
/// discarded. Used only to emulate the cost of a much larger model.
#[derive(Clone, Debug)]
pub struct CostEmulator {
    store: ParameterStore,
    layers: Vec<Lstm>,
}

impl CostEmulator {
    pub fn new(input: usize, layers: usize, width: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng_for(seed_value, "lm.cost_emulator");
        let mut store = ParameterStore::new();
        let layers = (0..layers)
            .map(|i| {
                let inp = if i == 0 { input } else { width };
                Lstm::new(&mut store, &format!("emu{i}"), inp, width, 0, &mut rng)
            })
            .collect();
        CostEmulator { store, layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn run(&self, x: &Tensor, states: &mut Vec<LstmState>) -> f64 {
        if states.len() != self.layers.len() {
            *states = self
                .layers
                .iter()
                .map(|l| LstmState::zeros(1, l.hidden))
                .collect();
        }
        let mut input = x.clone();
        for (layer, st) in self.layers.iter().zip(states.iter_mut()) {
            *st = layer.step(&self.store, &input, st, None);
            input = st.h.clone();
        }
        input.data().first().copied().unwrap_or(0.0)
    }
}

/// Recurrent state after consuming a prefix, with the next-word logits.
#[derive(Clone, Debug)]
pub struct LmState {
    lstm: LstmState,
    pub logits: Vec<f64>,
    emulated: Vec<LstmState>,
    /// Running sum of emulator outputs; keeps that work observable.
    pub emulation_checksum: f64,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub store: ParameterStore,
    emb: Embedding,
    lstm: Lstm,
    out: Linear,
    vocab_len: usize,
    embed_dim: usize,
    hidden: usize,
    emulator: Option<CostEmulator>,
}

impl LanguageModel {
    pub fn new(vocab_len: usize, embed_dim: usize, hidden: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng_for(seed_value, "lm.init");
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "lm.emb", vocab_len, embed_dim, &mut rng);
        let lstm = Lstm::new(&mut store, "lm.lstm", embed_dim, hidden, 0, &mut rng);
        let out = Linear::new(&mut store, "lm.out", hidden, vocab_len, &mut rng);
        LanguageModel {
            store,
            emb,
            lstm,
            out,
            vocab_len,
            embed_dim,
            hidden,
            emulator: None,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Attaches (or removes) cost emulation layers. Sampling results are
    /// unaffected; only the work per step grows.
    pub fn set_cost_emulator(&mut self, emulator: Option<CostEmulator>) {
        self.emulator = emulator;
    }

    pub fn cost_emulator(&self) -> Option<&CostEmulator> {
        self.emulator.as_ref()
    }

    /// Summed cross-entropy over every predicted token of `batch` and its
    /// gradient.
    pub fn batch_loss(&self, batch: &[&Sentence], grads: &mut Gradients) -> Result<(f64, usize)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyInput("LanguageModel::batch_loss"));
        }
        // Longest first, so the recurrence only touches live rows.
        let mut sorted = batch.to_vec();
        sorted.sort_by_key(|s| std::cmp::Reverse(s.len()));
        let batch = &sorted[..];
        let lengths: Vec<usize> = batch.iter().map(|s| s.len() + 1).collect();
        let steps = *lengths.iter().max().expect("nonempty");
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for s in batch {
                let tok = s.tokens();
                ids.push(if t == 0 || t > tok.len() { EOS } else { tok[t - 1] });
            }
        }
        let xs = self.emb.forward(&self.store, &ids)?;
        let trace = self.lstm.forward(&self.store, &xs, &lengths, None, false)?;
        let logits = self.out.forward(&self.store, &trace.hs)?;
        let v = self.vocab_len;
        let mut d_logits = Tensor::zeros(&[steps * b, v]);
        let mut loss = 0.0;
        let mut count = 0;
        for t in 0..steps {
            for (bi, s) in batch.iter().enumerate() {
                if t >= lengths[bi] {
                    continue;
                }
                let row = t * b + bi;
                let target = s.tokens()[t];
                let lg = logits.row(row);
                loss += log_sum_exp(lg) - lg[target];
                count += 1;
                let d = d_logits.row_mut(row);
                d.copy_from_slice(lg);
                softmax_in_place(d);
                d[target] -= 1.0;
            }
        }
        let d_hs = self
            .out
            .backward(&self.store, &trace.hs, &d_logits, grads, true)
            .expect("dx requested");
        let need_dx = grads.wants(self.emb.table);
        let dx = self
            .lstm
            .backward(&self.store, &trace, &d_hs, grads, need_dx, false)
            .dx;
        if let Some(dx) = dx {
            self.emb.backward(&ids, &dx, grads);
        }
        Ok((loss, count))
    }

    /// Mean per-token cross-entropy over `sentences`.
    pub fn mean_loss(&self, sentences: &[Sentence]) -> Result<f64> {
        let refs: Vec<&Sentence> = sentences.iter().collect();
        let r = batch_gradients(&refs, 32, |chunk| {
            let mut g = Gradients::frozen(&self.store);
            let (loss_sum, count) = self.batch_loss(chunk, &mut g)?;
            Ok(ChunkResult {
                grads: g,
                loss_sum,
                count,
            })
        })?;
        Ok(r.loss_sum / r.count.max(1) as f64)
    }

    /// State after the start symbol.
    pub fn start(&self) -> Result<LmState> {
        let empty = LmState {
            lstm: LstmState::zeros(1, self.hidden),
            logits: Vec::new(),
            emulated: Vec::new(),
            emulation_checksum: 0.0,
        };
        self.advance(&empty, EOS)
    }

    /// Consumes one word.
    pub fn advance(&self, state: &LmState, word: WordId) -> Result<LmState> {
        let x = self.emb.forward(&self.store, &[word])?;
        let lstm = self.lstm.step(&self.store, &x, &state.lstm, None);
        let logits = self.out.forward_row(&self.store, lstm.h.data());
        let mut emulated = state.emulated.clone();
        let mut checksum = state.emulation_checksum;
        if let Some(emu) = &self.emulator {
            checksum += emu.run(&lstm.h, &mut emulated);
        }
        Ok(LmState {
            lstm,
            logits,
            emulated,
            emulation_checksum: checksum,
        })
    }

    pub fn context_state(&self, context: &[WordId]) -> Result<LmState> {
        let mut st = self.start()?;
        for &w in context {
            st = self.advance(&st, w)?;
        }
        Ok(st)
    }

    /// Next-word logits after `context` (which excludes the start symbol).
    pub fn next_logits(&self, context: &[WordId]) -> Result<Vec<f64>> {
        Ok(self.context_state(context)?.logits)
    }

    pub fn next_distribution(&self, context: &[WordId]) -> Result<Vec<f64>> {
        let mut p = self.next_logits(context)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "lm".into());
        meta.insert("vocab_len".into(), self.vocab_len.to_string());
        meta.insert("embed_dim".into(), self.embed_dim.to_string());
        meta.insert("hidden".into(), self.hidden.to_string());
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "lm" {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: "not a language model checkpoint".into(),
            });
        }
        let mut lm = LanguageModel::new(
            ck.meta_parse("vocab_len")?,
            ck.meta_parse("embed_dim")?,
            ck.meta_parse("hidden")?,
            0,
        );
        ck.restore_into(&mut lm.store)?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Picks a word from logits: argmax (lowest id on ties) when greedy, otherwise
/// ancestral sampling from `softmax(logits / temperature)`.
pub fn pick_word<R: Rng>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> WordId {
    if cfg.greedy {
        return argmax(logits);
    }
    let mut p: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    softmax_in_place(&mut p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the total; fall back to the most likely word.
    argmax(&p)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Samples up to `cfg.max_len` words following `observed`, stopping early
/// (and dropping the EOS) when the end of the sentence is drawn. The random
/// stream is seeded from `cfg.seed`.
pub fn sample_lookahead(lm: &LanguageModel, observed: &[WordId], cfg: &SamplerConfig) -> Result<Vec<WordId>> {
    let mut rng = seed::seeded(cfg.seed);
    sample_lookahead_with(lm, observed, cfg, &mut rng)
}

pub fn sample_lookahead_with<R: Rng>(
    lm: &LanguageModel,
    observed: &[WordId],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<WordId>> {
    if observed.is_empty() {
        return Err(Error::EmptyInput("sample_lookahead"));
    }
    cfg.validate()?;
    let mut state = lm.context_state(observed)?;
    let mut out = Vec::with_capacity(cfg.max_len);
    while out.len() < cfg.max_len {
        let w = pick_word(&state.logits, cfg, rng);
        if w == EOS {
            break;
        }
        out.push(w);
        if out.len() < cfg.max_len {
            state = lm.advance(&state, w)?;
        }
    }
    Ok(out)
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default)]
pub struct LmTrainLog {
    pub losses: Vec<f64>,
}

/// Trains a fresh model on `train` with minibatches drawn uniformly with
/// replacement.
pub fn train_lm(
    train: &[Sentence],
    vocab_len: usize,
    cfg: &LmConfig,
    adam: &AdamConfig,
    seed_value: u64,
) -> Result<(LanguageModel, LmTrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("train_lm"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("lm.batch_size must be >= 1".into()));
    }
    let mut lm = LanguageModel::new(vocab_len, cfg.embed_dim, cfg.hidden, seed_value);
    let mut opt = AdamState::new(
        &lm.store,
        AdamConfig {
            lr: cfg.learning_rate,
            ..*adam
        },
    );
    let mut rng = seed::rng_for(seed_value, "lm.batches");
    let mut log = LmTrainLog::default();
    for it in 0..cfg.iterations {
        let batch: Vec<&Sentence> = (0..cfg.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let model = &lm;
        let r = batch_gradients(&batch, crate::train::GRAD_CHUNK, |chunk| {
            let mut g = Gradients::for_store(&model.store);
            let (loss_sum, count) = model.batch_loss(chunk, &mut g)?;
            Ok(ChunkResult {
                grads: g,
                loss_sum,
                count,
            })
        })?;
        let loss = apply_step(&mut lm.store, &mut opt, r, cfg.grad_clip, it)?;
        log.losses.push(loss);
    }
    Ok((lm, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};

    fn sentence(ids: &[usize]) -> Sentence {
        Sentence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn distribution_is_normalized() {
        let lm = LanguageModel::new(12, 6, 8, 3);
        for ctx in [vec![2], vec![2, 5, 7], vec![11, 11]] {
            let p = lm.next_distribution(&ctx).unwrap();
            assert_eq!(p.len(), 12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let mut lm = LanguageModel::new(7, 3, 4, 11);
        let data = [sentence(&[2, 3, 4]), sentence(&[5, 6])];
        let refs: Vec<&Sentence> = data.iter().collect();
        let mut g = Gradients::for_store(&lm.store);
        let (_, count) = lm.batch_loss(&refs, &mut g).unwrap();
        g.scale(1.0 / count as f64);
        let probe = lm.clone();
        let report = grad_check(
            &mut lm.store,
            &g,
            |store| {
                let mut m = probe.clone();
                m.store = store.clone();
                let mut g = Gradients::frozen(store);
                m.batch_loss(&refs, &mut g).unwrap().0 / count as f64
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn incremental_state_matches_batched_logits() {
        let lm = LanguageModel::new(9, 4, 5, 2);
        let s = sentence(&[3, 8, 2]);
        let xs_ids = [EOS, 3, 8, 2];
        let xs = lm.emb.forward(&lm.store, &xs_ids).unwrap();
        let trace = lm.lstm.forward(&lm.store, &xs, &[4], None, false).unwrap();
        let logits = lm.out.forward(&lm.store, &trace.hs).unwrap();
        for t in 0..4 {
            let inc = lm.next_logits(&s.tokens()[..t]).unwrap();
            for (a, b) in inc.iter().zip(logits.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lookahead_respects_bounds_and_is_deterministic() {
        let lm = LanguageModel::new(10, 4, 6, 5);
        for seed_value in 0..20 {
            let cfg = SamplerConfig {
                max_len: 3,
                temperature: 1.0,
                greedy: false,
                seed: seed_value,
            };
            let a = sample_lookahead(&lm, &[2, 4], &cfg).unwrap();
            let b = sample_lookahead(&lm, &[2, 4], &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.len() <= 3);
            assert!(!a.contains(&EOS));
        }
    }

    #[test]
    fn empty_observation_is_rejected() {
        let lm = LanguageModel::new(10, 4, 6, 5);
        assert!(sample_lookahead(&lm, &[], &SamplerConfig::default()).is_err());
    }

    #[test]
    fn cost_emulator_does_not_change_samples() {
        let mut lm = LanguageModel::new(10, 4, 6, 5);
        let cfg = SamplerConfig {
            greedy: false,
            seed: 9,
            ..SamplerConfig::default()
        };
        let plain = sample_lookahead(&lm, &[3, 3, 7], &cfg).unwrap();
        lm.set_cost_emulator(Some(CostEmulator::new(6, 2, 8, 1)));
        assert_eq!(sample_lookahead(&lm, &[3, 3, 7], &cfg).unwrap(), plain);
        assert_ne!(lm.context_state(&[3]).unwrap().emulation_checksum, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let lm = LanguageModel::new(8, 3, 5, 4);
        let back = LanguageModel::from_checkpoint(&Checkpoint::from_bytes(&lm.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(lm.next_logits(&[2, 3]).unwrap(), back.next_logits(&[2, 3]).unwrap());
    }
}
