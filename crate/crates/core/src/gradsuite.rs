//! Finite-difference checks for every differentiable building block and for
//! the two full training objectives, over many seeds and shapes.
//!
//! Inputs that are not parameters in normal use (activations, logits) are
//! registered as parameters here so their gradients get checked too.

use rand::Rng;

use crate::corpus::{FrameOracle, Sentence};
use crate::distill::{chunk_gradients, make_example, Student, StudentDims, TargetSource};
use crate::nn::{
    bce_stop_loss_grad, grad_check, masked_mean, masked_mean_backward, mse_loss_grad, Blstm, Embedding,
    GradCheckOptions, Gradients, Linear, Lstm, ParamId, ParameterStore, Tensor,
};
use crate::seed::item_rng;
use crate::segment::Window;
use crate::tts::{Teacher, TeacherDims, TeacherExample};

/// Worst relative error of one check family over all of its cases.
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub worst_case: usize,
}

type Check = fn(u64) -> f64;

pub const CHECKS: &[(&str, Check)] = &[
    ("linear", linear),
    ("embedding", embedding),
    ("lstm", lstm),
    ("blstm", blstm),
    ("masked_mean", pooled_mean),
    ("mse", mse),
    ("bce", bce),
    ("teacher_loss", teacher_loss),
    ("student_objective_0.95", student_objective),
];

/// Runs every check on `cases` seeds.
pub fn run(cases: usize) -> Vec<SuiteOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let mut out = SuiteOutcome {
                name,
                cases,
                max_rel_error: 0.0,
                worst_case: 0,
            };
            for c in 0..cases {
                let e = f(c as u64);
                if e > out.max_rel_error || e.is_nan() {
                    out.max_rel_error = e;
                    out.worst_case = c;
                }
            }
            out
        })
        .collect()
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn put(grads: &mut Gradients, id: ParamId, g: &Tensor) {
    grads
        .slot_mut(id)
        .expect("trainable")
        .add_assign(g)
        .expect("same shape");
}

fn check(store: &mut ParameterStore, grads: &Gradients, loss: impl FnMut(&ParameterStore) -> f64, seed: u64) -> f64 {
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    grad_check(store, grads, loss, &opts).max_rel_error
}

fn linear(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.linear", 0);
    let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let mut store = ParameterStore::new();
    let layer = Linear::new(&mut store, "l", i, o, &mut rng);
    store.value_mut(layer.b).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let x = store.add("x", random_tensor(&mut rng, &[b, i], 1.0), true);
    let probe = random_tensor(&mut rng, &[b, o], 1.0);
    let f = |s: &ParameterStore| dot(&layer.forward(s, s.value(x)).unwrap(), &probe);
    let mut g = Gradients::for_store(&store);
    let dx = layer.backward(&store, store.value(x), &probe, &mut g, true).unwrap();
    put(&mut g, x, &dx);
    check(&mut store, &g, f, seed)
}

fn embedding(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.embedding", 0);
    let (v, d, n) = (rng.random_range(2..8), rng.random_range(1..5), rng.random_range(1..7));
    let mut store = ParameterStore::new();
    let emb = Embedding::new(&mut store, "e", v, d, &mut rng);
    // Repeated ids exercise gradient accumulation.
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let probe = random_tensor(&mut rng, &[n, d], 1.0);
    let f = |s: &ParameterStore| dot(&emb.forward(s, &ids).unwrap(), &probe);
    let mut g = Gradients::for_store(&store);
    emb.backward(&ids, &probe, &mut g);
    check(&mut store, &g, f, seed)
}

fn random_lengths<R: Rng>(rng: &mut R, batch: usize, steps: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    l[0] = steps;
    if rng.random_bool(0.5) {
        l.sort_unstable_by(|a, b| b.cmp(a));
    }
    l
}

fn lstm(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.lstm", 0);
    let (b, t, i, h) = (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let static_dim = if rng.random_bool(0.5) { rng.random_range(1..3) } else { 0 };
    let reverse = rng.random_bool(0.5);
    let mut store = ParameterStore::new();
    let cell = Lstm::new(&mut store, "lstm", i, h, static_dim, &mut rng);
    // Move off the symmetric init so every gate matters.
    for id in [cell.wx, cell.wh, cell.b] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4));
    }
    let xs = store.add("xs", random_tensor(&mut rng, &[t * b, i], 1.0), true);
    let st = (static_dim > 0).then(|| store.add("static", random_tensor(&mut rng, &[b, static_dim], 1.0), true));
    let lengths = random_lengths(&mut rng, b, t);
    let probe = random_tensor(&mut rng, &[t * b, h], 1.0);
    let f = |s: &ParameterStore| {
        let tr = cell
            .forward(s, s.value(xs), &lengths, st.map(|id| s.value(id)), reverse)
            .unwrap();
        dot(&tr.hs, &probe)
    };
    let tr = cell
        .forward(&store, store.value(xs), &lengths, st.map(|id| store.value(id)), reverse)
        .unwrap();
    let mut g = Gradients::for_store(&store);
    let out = cell.backward(&store, &tr, &probe, &mut g, true, st.is_some());
    put(&mut g, xs, &out.dx.unwrap());
    if let Some(id) = st {
        put(&mut g, id, &out.d_static.unwrap());
    }
    check(&mut store, &g, f, seed)
}

fn blstm(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.blstm", 0);
    let (b, t, i, h) = (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let mut store = ParameterStore::new();
    let net = Blstm::new(&mut store, "b", i, h, &mut rng);
    let xs = store.add("xs", random_tensor(&mut rng, &[t * b, i], 1.0), true);
    let lengths = random_lengths(&mut rng, b, t);
    let probe = random_tensor(&mut rng, &[t * b, 2 * h], 1.0);
    let f = |s: &ParameterStore| dot(&net.forward(s, s.value(xs), &lengths).unwrap().outputs(), &probe);
    let tr = net.forward(&store, store.value(xs), &lengths).unwrap();
    let (df, db) = net.split_grad(&probe);
    let mut g = Gradients::for_store(&store);
    let dx = net.backward(&store, &tr, &df, &db, &mut g, true).unwrap();
    put(&mut g, xs, &dx);
    check(&mut store, &g, f, seed)
}

fn pooled_mean(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.masked_mean", 0);
    let (b, t, h) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4));
    let mut store = ParameterStore::new();
    let hs = store.add("hs", random_tensor(&mut rng, &[t * b, h], 1.0), true);
    let mut lengths = random_lengths(&mut rng, b, t);
    if b > 1 && rng.random_bool(0.3) {
        lengths[b - 1] = 0;
    }
    let probe = random_tensor(&mut rng, &[b, h], 1.0);
    let f = |s: &ParameterStore| dot(&masked_mean(s.value(hs), b, &lengths), &probe);
    let mut g = Gradients::for_store(&store);
    put(&mut g, hs, &masked_mean_backward(&probe, t, &lengths));
    check(&mut store, &g, f, seed)
}

fn mse(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.mse", 0);
    let shape = [rng.random_range(1..6), rng.random_range(1..5)];
    let mut store = ParameterStore::new();
    let pred = store.add("pred", random_tensor(&mut rng, &shape, 2.0), true);
    let target = random_tensor(&mut rng, &shape, 2.0);
    let f = |s: &ParameterStore| mse_loss_grad(s.value(pred), &target).unwrap().0;
    let mut g = Gradients::for_store(&store);
    put(&mut g, pred, &mse_loss_grad(store.value(pred), &target).unwrap().1);
    check(&mut store, &g, f, seed)
}

fn bce(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.bce", 0);
    let n = rng.random_range(1..10);
    let mut store = ParameterStore::new();
    let logits = store.add("z", random_tensor(&mut rng, &[n, 1], 6.0), true);
    let flags = Tensor::from_vec(&[n, 1], (0..n).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect()).unwrap();
    let f = |s: &ParameterStore| bce_stop_loss_grad(s.value(logits), &flags).unwrap().0;
    let mut g = Gradients::for_store(&store);
    put(&mut g, logits, &bce_stop_loss_grad(store.value(logits), &flags).unwrap().1);
    check(&mut store, &g, f, seed)
}

const TOY_VOCAB: usize = 9;

fn toy_sentence<R: Rng>(rng: &mut R) -> Sentence {
    let m = rng.random_range(3..8);
    Sentence::new((0..m).map(|_| rng.random_range(2..TOY_VOCAB)).collect()).unwrap()
}

fn toy_teacher<R: Rng>(rng: &mut R, seed: u64) -> Teacher {
    let dims = TeacherDims {
        word_dim: rng.random_range(2..5),
        encoder_hidden: rng.random_range(2..4),
        context_dim: rng.random_range(2..5),
        style_tokens: rng.random_range(2..5),
        decoder_hidden: rng.random_range(2..5),
        frame_dim: 2,
    };
    Teacher::new(TOY_VOCAB, dims, seed)
}

fn teacher_loss(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.teacher", 0);
    let mut teacher = toy_teacher(&mut rng, seed);
    let oracle = FrameOracle::new(TOY_VOCAB, 2, 2, seed).unwrap();
    let batch: Vec<TeacherExample> = (0..rng.random_range(1..4))
        .map(|_| {
            let s = toy_sentence(&mut rng);
            let ft = oracle.frames(&s).unwrap();
            let m = s.len();
            let start = rng.random_range(0..m);
            let n = rng.random_range(1..=(m - start).min(3));
            let (target, stop) = ft.segment(start, n);
            let rest = &s.words()[start + n..];
            let k = rng.random_range(0..=rest.len());
            TeacherExample {
                past: s.words()[..start].to_vec(),
                current: s.words()[start..start + n].to_vec(),
                future: rest[..k].to_vec(),
                target,
                stop,
                zero_context: rng.random_bool(0.2),
            }
        })
        .collect();
    let mut g = Gradients::for_store(&teacher.store);
    teacher.batch_loss(&batch, &mut g).unwrap();
    let probe = teacher.clone();
    check(
        &mut teacher.store,
        &g,
        |store| {
            let mut m = probe.clone();
            m.store = store.clone();
            m.batch_loss(&batch, &mut Gradients::frozen(store)).unwrap().0
        },
        seed,
    )
}

fn student_objective(seed: u64) -> f64 {
    let mut rng = item_rng(seed, "gradsuite.student", 0);
    let teacher = toy_teacher(&mut rng, seed);
    let oracle = FrameOracle::new(TOY_VOCAB, 2, 2, seed).unwrap();
    let source = TargetSource::Truth { max_len: 2 };
    let batch: Vec<_> = (0..rng.random_range(1..4))
        .map(|_| {
            let s = toy_sentence(&mut rng);
            let m = s.len();
            let start = rng.random_range(1..m);
            let end = rng.random_range(start + 1..=m.min(start + 2));
            make_example(&teacher, &s, &Window { start, end }, &source, Some(&oracle), &mut rng).unwrap()
        })
        .collect();
    let dims = StudentDims {
        table_dim: rng.random_range(2..6),
        hidden: rng.random_range(1..4),
        dense: rng.random_range(1..5),
        context_dim: teacher.dims.context_dim,
    };
    let mut student = Student::new(TOY_VOCAB, dims, seed, seed + 1);
    let mut g = Gradients::for_store(&student.store);
    chunk_gradients(&student, &teacher, &batch, 0.95, &mut g).unwrap();
    let probe = student.clone();
    check(
        &mut student.store,
        &g,
        |store| {
            let mut m = probe.clone();
            m.store = store.clone();
            chunk_gradients(&m, &teacher, &batch, 0.95, &mut Gradients::frozen(store)).unwrap().0
        },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_twenty_cases() {
        for out in run(20) {
            assert!(out.max_rel_error < 1e-4, "{out:?}");
        }
    }
}
