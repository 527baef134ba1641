//! Student context predictor and teacher-student distillation.
//!
//! The student sees only the words observed so far and learns to reproduce
//! the teacher's context embedding, which the teacher computes from the past
//! plus a lookahead (LM-sampled, or the true future for the ablation).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FrameOracle, Sentence, WordId, UNK};
use crate::error::{Error, Result};
use crate::lm::{sample_lookahead_with, LanguageModel, SamplerConfig};
use crate::nn::{AdamConfig, AdamState, Blstm, Checkpoint, Gradients, Linear, ParamId, ParameterStore, Tensor};
use crate::seed;
use crate::segment::Window;
use crate::train::{apply_step, ChunkResult, GRAD_CHUNK};
use crate::tts::{window_pool, Teacher, TeacherExample};

/// Width of the frozen word-vector table.
pub const TABLE_DIM: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentSize {
    Small,
    Medium,
    Large,
}

impl StudentSize {
    pub const ALL: [StudentSize; 3] = [StudentSize::Small, StudentSize::Medium, StudentSize::Large];

    /// BLSTM width per direction.
    pub fn hidden(self) -> usize {
        match self {
            StudentSize::Small => 100,
            StudentSize::Medium => 300,
            StudentSize::Large => 500,
        }
    }

    pub fn dense(self) -> usize {
        match self {
            StudentSize::Small => 200,
            StudentSize::Medium => 600,
            StudentSize::Large => 1000,
        }
    }

    pub fn dims(self, context_dim: usize) -> StudentDims {
        StudentDims {
            table_dim: TABLE_DIM,
            hidden: self.hidden(),
            dense: self.dense(),
            context_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StudentSize::Small => "small",
            StudentSize::Medium => "medium",
            StudentSize::Large => "large",
        }
    }
}

impl fmt::Display for StudentSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudentSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(StudentSize::Small),
            "medium" => Ok(StudentSize::Medium),
            "large" => Ok(StudentSize::Large),
            _ => Err(Error::Config(format!(
                "unknown student size `{s}` (expected small, medium or large)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentDims {
    pub table_dim: usize,
    pub hidden: usize,
    pub dense: usize,
    pub context_dim: usize,
}

impl StudentDims {
    /// Trainable parameters: BLSTM, hidden dense layer and output layer.
    pub fn param_count(&self) -> usize {
        let (i, h, d, c) = (self.table_dim, self.hidden, self.dense, self.context_dim);
        2 * 4 * h * (i + h + 1) + (2 * h * d + d) + (d * c + c)
    }
}

/// Student network plus its frozen word-vector table.
#[derive(Clone, Debug)]
pub struct Student {
    pub store: ParameterStore,
    pub dims: StudentDims,
    pub size: Option<StudentSize>,
    pub vocab_len: usize,
    table: ParamId,
    blstm: Blstm,
    hidden: Linear,
    out: Linear,
}

struct StudentCache {
    order: Vec<usize>,
    trace: crate::nn::BlstmTrace,
    steps: usize,
    boundary: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// Squared Euclidean distance, averaged over the rows of a batch.
pub fn distil_loss(e_s: &Tensor, e_t: &Tensor) -> Result<f64> {
    if e_s.shape() != e_t.shape() {
        return Err(Error::dim("distil_loss", "e_t", e_s.shape(), e_t.shape()));
    }
    let rows = e_s.rows().max(1) as f64;
    let sum: f64 = e_s.data().iter().zip(e_t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / rows)
}

/// `(1 - lambda) * l_target + lambda * l_distil`.
pub fn combined_loss(l_target: f64, l_distil: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(l_distil);
    }
    if lambda == 0.0 {
        return Ok(l_target);
    }
    Ok((1.0 - lambda) * l_target + lambda * l_distil)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

impl Student {
    /// `table_seed` fixes the frozen word vectors, `init_seed` the trainable
    /// weights.
    pub fn new(vocab_len: usize, dims: StudentDims, table_seed: u64, init_seed: u64) -> Self {
        let mut store = ParameterStore::new();
        let mut trng = seed::rng_for(table_seed, "student.table");
        let table = store.add_uniform("student.table", &[vocab_len, dims.table_dim], 0.5, &mut trng);
        store.set_trainable(table, false);
        let mut rng = seed::rng_for(init_seed, "student.init");
        let blstm = Blstm::new(&mut store, "student.blstm", dims.table_dim, dims.hidden, &mut rng);
        let hidden = Linear::new(&mut store, "student.dense", 2 * dims.hidden, dims.dense, &mut rng);
        let out = Linear::new(&mut store, "student.out", dims.dense, dims.context_dim, &mut rng);
        Student {
            store,
            dims,
            size: None,
            vocab_len,
            table,
            blstm,
            hidden,
            out,
        }
    }

    pub fn with_size(vocab_len: usize, size: StudentSize, context_dim: usize, table_seed: u64, init_seed: u64) -> Self {
        let mut s = Student::new(vocab_len, size.dims(context_dim), table_seed, init_seed);
        s.size = Some(size);
        s
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn table(&self) -> &Tensor {
        self.store.value(self.table)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    fn lookup(&self, words: &[WordId]) -> Tensor {
        let table = self.store.value(self.table);
        let dim = self.dims.table_dim;
        let mut data = Vec::with_capacity(words.len() * dim);
        for &w in words {
            let id = if w < self.vocab_len { w } else { UNK };
            data.extend_from_slice(table.row(id));
        }
        Tensor::from_vec(&[words.len(), dim], data).expect("shape")
    }

    /// `G(v_1..v_n)`: BLSTM boundary states, dense + ReLU, dense.
    pub fn predict(&self, observed: &[WordId]) -> Result<Vec<f64>> {
        if observed.is_empty() {
            return Err(Error::EmptyInput("student_predict"));
        }
        let xs = self.lookup(observed);
        let trace = self.blstm.forward(&self.store, &xs, &[observed.len()])?;
        let mut boundary = trace.backward_first().into_data();
        boundary.extend(trace.forward_last().into_data());
        let mut a = self.hidden.forward_row(&self.store, &boundary);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(self.out.forward_row(&self.store, &a))
    }

    fn batch_forward(&self, seqs: &[&[WordId]]) -> Result<(Tensor, StudentCache)> {
        let b = seqs.len();
        if b == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptyInput("Student::batch_forward"));
        }
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
        let lengths: Vec<usize> = order.iter().map(|&i| seqs[i].len()).collect();
        let steps = lengths[0];
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for &i in &order {
                let w = seqs[i].get(t).copied().unwrap_or(UNK);
                ids.push(if w < self.vocab_len { w } else { UNK });
            }
        }
        let trace = self.blstm.forward_table(&self.store, self.table(), &ids, &lengths)?;
        let (bf, fl) = (trace.backward_first(), trace.forward_last());
        let h = self.dims.hidden;
        let mut boundary = Tensor::zeros(&[b, 2 * h]);
        for r in 0..b {
            boundary.row_mut(r)[..h].copy_from_slice(bf.row(r));
            boundary.row_mut(r)[h..].copy_from_slice(fl.row(r));
        }
        let pre = self.hidden.forward(&self.store, &boundary)?;
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let out_sorted = self.out.forward(&self.store, &act)?;
        let mut out = Tensor::zeros(&[b, self.dims.context_dim]);
        for (r, &i) in order.iter().enumerate() {
            out.row_mut(i).copy_from_slice(out_sorted.row(r));
        }
        Ok((
            out,
            StudentCache {
                order,
                trace,
                steps,
                boundary,
                pre,
                act,
            },
        ))
    }

    fn batch_backward(&self, cache: &StudentCache, d_out: &Tensor, grads: &mut Gradients) {
        let b = cache.order.len();
        let h = self.dims.hidden;
        let mut d_sorted = Tensor::zeros(d_out.shape());
        for (r, &i) in cache.order.iter().enumerate() {
            d_sorted.row_mut(r).copy_from_slice(d_out.row(i));
        }
        let mut d_act = self
            .out
            .backward(&self.store, &cache.act, &d_sorted, grads, true)
            .expect("dx");
        for (g, p) in d_act.data_mut().iter_mut().zip(cache.pre.data()) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let d_boundary = self
            .hidden
            .backward(&self.store, &cache.boundary, &d_act, grads, true)
            .expect("dx");
        // Forward state at the last step of the (carried) trace, backward
        // state at step 0.
        let mut d_f = Tensor::zeros(&[cache.steps * b, h]);
        let mut d_b = Tensor::zeros(&[cache.steps * b, h]);
        for r in 0..b {
            d_b.row_mut(r).copy_from_slice(&d_boundary.row(r)[..h]);
            d_f.row_mut((cache.steps - 1) * b + r)
                .copy_from_slice(&d_boundary.row(r)[h..]);
        }
        self.blstm
            .backward(&self.store, &cache.trace, &d_f, &d_b, grads, false);
    }

    pub fn to_checkpoint(&self, lambda: f64) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "student".into());
        meta.insert("vocab_len".into(), self.vocab_len.to_string());
        meta.insert("dims".into(), serde_json::to_string(&self.dims).expect("serializable"));
        if let Some(size) = self.size {
            meta.insert("size".into(), size.to_string());
        }
        meta.insert("lambda".into(), lambda.to_string());
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "student" {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: "not a student checkpoint".into(),
            });
        }
        let dims: StudentDims = serde_json::from_str(ck.meta_str("dims")?).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: format!("bad student dims: {e}"),
        })?;
        let mut s = Student::new(ck.meta_parse("vocab_len")?, dims, 0, 0);
        s.size = match ck.meta.get("size") {
            Some(v) => Some(v.parse()?),
            None => None,
        };
        ck.restore_into(&mut s.store)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path, lambda: f64) -> Result<()> {
        self.to_checkpoint(lambda).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Where teacher targets get their lookahead from.
#[derive(Clone, Copy)]
pub enum TargetSource<'a> {
    Pseudo {
        lm: &'a LanguageModel,
        sampler: &'a SamplerConfig,
    },
    /// The first `max_len` true future words.
    Truth { max_len: usize },
}

/// One distillation example: what the student sees and the teacher target.
#[derive(Clone, Debug)]
pub struct DistillExample {
    pub observed: Vec<WordId>,
    pub target: Vec<f64>,
    /// Teacher-forced decoding material, present when `L_target` is needed.
    pub frames: Option<TeacherExample>,
}

/// Lookahead words for the window under `source`.
pub fn lookahead_for<R: Rng>(s: &Sentence, win: &Window, source: &TargetSource<'_>, rng: &mut R) -> Result<Vec<WordId>> {
    let words = s.words();
    match source {
        TargetSource::Pseudo { lm, sampler } => sample_lookahead_with(lm, &words[..win.end], sampler, rng),
        TargetSource::Truth { max_len } => {
            let rest = &words[win.end..];
            Ok(rest[..rest.len().min(*max_len)].to_vec())
        }
    }
}

pub fn make_example<R: Rng>(
    teacher: &Teacher,
    s: &Sentence,
    win: &Window,
    source: &TargetSource<'_>,
    oracle: Option<&FrameOracle>,
    rng: &mut R,
) -> Result<DistillExample> {
    let words = s.words();
    let future = lookahead_for(s, win, source, rng)?;
    let target = teacher.context_for(&words[..win.start], &future)?;
    let frames = match oracle {
        Some(o) => {
            let (target, stop) = o.frames(s)?.segment(win.start, win.end - win.start);
            Some(TeacherExample {
                past: words[..win.start].to_vec(),
                current: words[win.start..win.end].to_vec(),
                future,
                target,
                stop,
                zero_context: false,
            })
        }
        None => None,
    };
    Ok(DistillExample {
        observed: words[..win.end].to_vec(),
        target,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub size: StudentSize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub window: usize,
    pub hop: usize,
    /// Progress rows are written every this many iterations.
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            size: StudentSize::Small,
            iterations: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            window: 3,
            hop: 1,
            log_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.batch_size == 0 || self.window == 0 || self.hop == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "distill batch_size, window, hop and log_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressRow {
    pub iteration: usize,
    pub l_distil: f64,
    pub l_target: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DistillLog {
    pub progress: Vec<ProgressRow>,
}

impl DistillLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_distil,l_target,combined\n");
        for r in &self.progress {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.l_distil, r.l_target, r.combined));
        }
        out
    }
}

pub(crate) struct ChunkLosses {
    distil: f64,
    target: f64,
}

/// Summed losses and student gradients for a chunk. `L_target` is evaluated
/// whenever frames are attached; its gradient is only used when `lambda < 1`.
pub(crate) fn chunk_gradients(
    student: &Student,
    teacher: &Teacher,
    chunk: &[DistillExample],
    lambda: f64,
    grads: &mut Gradients,
) -> Result<(f64, ChunkLosses)> {
    let seqs: Vec<&[WordId]> = chunk.iter().map(|e| e.observed.as_slice()).collect();
    let (e_s, cache) = student.batch_forward(&seqs)?;
    let c = student.dims.context_dim;
    let mut d_out = Tensor::zeros(&[chunk.len(), c]);
    let mut distil = 0.0;
    for (r, ex) in chunk.iter().enumerate() {
        if ex.target.len() != c {
            return Err(Error::dim("distil", "target", c, ex.target.len()));
        }
        for ((g, s), t) in d_out.row_mut(r).iter_mut().zip(e_s.row(r)).zip(&ex.target) {
            distil += (s - t) * (s - t);
            *g = lambda * 2.0 * (s - t);
        }
    }
    let mut target = 0.0;
    if chunk.iter().all(|e| e.frames.is_some()) {
        let frames: Vec<TeacherExample> = chunk.iter().map(|e| e.frames.clone().expect("checked")).collect();
        let mut frozen = Gradients::frozen(&teacher.store);
        let (l, _, d_e) = teacher.batch_loss_with_context(&frames, Some(&e_s), &mut frozen)?;
        target = l;
        if lambda < 1.0 {
            let mut d_e = d_e.expect("external context gradient");
            d_e.scale(1.0 - lambda);
            d_out.add_assign(&d_e)?;
        }
    } else if lambda < 1.0 {
        return Err(Error::Config("lambda < 1 needs oracle frames for L_target".into()));
    }
    student.batch_backward(&cache, &d_out, grads);
    let combined = if lambda < 1.0 {
        (1.0 - lambda) * target + lambda * distil
    } else {
        distil
    };
    Ok((combined, ChunkLosses { distil, target }))
}

/// Mean distillation loss over fixed examples (batched, no gradients).
pub fn mean_distil_loss(student: &Student, examples: &[DistillExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("mean_distil_loss"));
    }
    let ranges = crate::par::chunk_ranges(examples.len(), 64);
    let parts = crate::par::map(&ranges, |r| -> Result<f64> {
        let chunk = &examples[r.clone()];
        let seqs: Vec<&[WordId]> = chunk.iter().map(|e| e.observed.as_slice()).collect();
        let (e_s, _) = student.batch_forward(&seqs)?;
        let t = Tensor::from_vec(e_s.shape(), chunk.iter().flat_map(|e| e.target.iter().copied()).collect())?;
        Ok(distil_loss(&e_s, &t)? * chunk.len() as f64)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / examples.len() as f64)
}

/// Examples for every window of `sentences`; targets come from `source`
/// with a per-window stream derived from `seed_value`.
pub fn build_examples(
    teacher: &Teacher,
    sentences: &[Sentence],
    source: &TargetSource<'_>,
    window: usize,
    hop: usize,
    seed_value: u64,
) -> Result<Vec<DistillExample>> {
    let pool = window_pool(sentences, window, hop);
    let made = crate::par::map_range(pool.len(), |i| {
        let (si, win) = &pool[i];
        let mut rng = seed::item_rng(seed_value, "distill.examples", i as u64);
        make_example(teacher, &sentences[*si], win, source, None, &mut rng)
    });
    made.into_iter().collect()
}

/// Trains a student against a frozen teacher. The teacher is only borrowed;
/// its parameters are audited bitwise before returning.
pub fn train_student_from(
    teacher: &Teacher,
    source: TargetSource<'_>,
    train: &[Sentence],
    oracle: Option<&FrameOracle>,
    cfg: &DistillConfig,
    adam: &AdamConfig,
    seed_value: u64,
) -> Result<(Student, DistillLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("train_student"));
    }
    if cfg.lambda < 1.0 && oracle.is_none() {
        return Err(Error::Config("lambda < 1 needs the frame oracle".into()));
    }
    let before = teacher.to_checkpoint().digest();
    let mut student = Student::with_size(
        teacher.vocab_len,
        cfg.size,
        teacher.context_dim(),
        seed::derive_seed(seed_value, "distill.table"),
        seed_value,
    );
    let table_before = student.table().clone();
    let mut opt = AdamState::new(
        &student.store,
        AdamConfig {
            lr: cfg.learning_rate,
            ..*adam
        },
    );
    let pool = window_pool(train, cfg.window, cfg.hop);
    let mut log = DistillLog::default();
    for it in 0..cfg.iterations {
        let logging = it % cfg.log_every == 0 || it + 1 == cfg.iterations;
        // L_target is only computed when it is trained on or logged.
        let frames = if cfg.lambda < 1.0 || logging { oracle } else { None };
        let mut rng = seed::item_rng(seed_value, "distill.batch", it as u64);
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect();
        let batch: Vec<DistillExample> = {
            let made = crate::par::map_range(picks.len(), |k| {
                let (si, win) = &pool[picks[k]];
                let mut r = seed::item_rng(seed::derive_seed(seed_value, "distill.lookahead"), &it.to_string(), k as u64);
                make_example(teacher, &train[*si], win, &source, frames, &mut r)
            });
            made.into_iter().collect::<Result<_>>()?
        };
        let model = &student;
        let lambda = cfg.lambda;
        let mut losses = (0.0, 0.0);
        let r = {
            let parts = crate::par::map(&crate::par::chunk_ranges(batch.len(), GRAD_CHUNK), |rg| {
                let mut g = Gradients::for_store(&model.store);
                let chunk = &batch[rg.clone()];
                chunk_gradients(model, teacher, chunk, lambda, &mut g).map(|(l, parts)| {
                    (
                        ChunkResult {
                            grads: g,
                            loss_sum: l,
                            count: chunk.len(),
                        },
                        parts,
                    )
                })
            });
            let mut total: Option<ChunkResult> = None;
            for p in parts {
                let (cr, parts) = p?;
                losses.0 += parts.distil;
                losses.1 += parts.target;
                match total.as_mut() {
                    None => total = Some(cr),
                    Some(t) => {
                        t.grads.merge(&cr.grads)?;
                        t.loss_sum += cr.loss_sum;
                        t.count += cr.count;
                    }
                }
            }
            total.ok_or(Error::EmptyInput("distill batch"))?
        };
        let n = r.count as f64;
        let combined = apply_step(&mut student.store, &mut opt, r, cfg.grad_clip, it)?;
        if logging {
            let l_target = if frames.is_some() { losses.1 / n } else { f64::NAN };
            log.progress.push(ProgressRow {
                iteration: it,
                l_distil: losses.0 / n,
                l_target,
                combined,
            });
        }
    }
    if teacher.to_checkpoint().digest() != before {
        return Err(Error::Training {
            iteration: cfg.iterations,
            detail: "teacher parameters changed during distillation".into(),
        });
    }
    if student.table() != &table_before {
        return Err(Error::Training {
            iteration: cfg.iterations,
            detail: "frozen word table changed during distillation".into(),
        });
    }
    Ok((student, log))
}

/// Distillation with LM-sampled pseudo-lookahead targets.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    teacher: &Teacher,
    lm: &LanguageModel,
    sampler: &SamplerConfig,
    train: &[Sentence],
    oracle: Option<&FrameOracle>,
    cfg: &DistillConfig,
    adam: &AdamConfig,
    seed_value: u64,
) -> Result<(Student, DistillLog)> {
    sampler.validate()?;
    train_student_from(teacher, TargetSource::Pseudo { lm, sampler }, train, oracle, cfg, adam, seed_value)
}

/// Ablation: targets use the first `max_len` true future words.
pub fn train_student_without_lm(
    teacher: &Teacher,
    max_len: usize,
    train: &[Sentence],
    oracle: Option<&FrameOracle>,
    cfg: &DistillConfig,
    adam: &AdamConfig,
    seed_value: u64,
) -> Result<(Student, DistillLog)> {
    train_student_from(teacher, TargetSource::Truth { max_len }, train, oracle, cfg, adam, seed_value)
}
