//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains the default configuration end to end for five seeds through the
//! real binary, so this takes about half an hour on one core. Set
//! `ITTS_ACCEPTANCE_DIR` to keep the run directories.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{itts, write_config, CHAIN, TINY};
use itts_core::config::ExperimentConfig;
use itts_core::corpus::{read_corpus, Sentence, Vocabulary};
use itts_core::distill::{build_examples, mean_distil_loss, train_student, DistillConfig, Student, StudentSize, TargetSource};
use itts_core::gradsuite;
use itts_core::lm::{LanguageModel, SamplerConfig};
use itts_core::pipeline::{incremental_synthesize, Models, PipelineConfig, Policy};
use itts_core::tts::{Teacher, TeacherDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        let line = format!("[{}] C{id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Runs one subcommand and returns its wall time.
fn timed(dir: &Path, args: &[&str]) -> Duration {
    let t = Instant::now();
    let out = itts(dir, args);
    assert!(
        out.status.success(),
        "itts {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    t.elapsed()
}

fn gradients(report: &mut Report) {
    let t = Instant::now();
    let outcomes = gradsuite::run(20);
    let secs = t.elapsed().as_secs_f64();
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let pass = outcomes.iter().all(|o| o.max_rel_error < 1e-4 && o.cases >= 20) && secs < 120.0;
    report.record(
        1,
        pass,
        format!(
            "{} checks x 20 cases, worst rel err {:.2e} ({}), {secs:.1}s",
            outcomes.len(),
            worst.max_rel_error,
            worst.name
        ),
    );
}

fn closed_form(report: &mut Report) {
    // Word vectors 300-d, BLSTM hidden h per direction, dense d, output 256.
    let oracle = |h: usize, d: usize| 2 * (4 * h * 300 + 4 * h * h + 4 * h) + 2 * h * d + d + d * 256 + 256;
    let mut ok = true;
    let mut parts = Vec::new();
    for (size, h, d) in [(StudentSize::Small, 100, 200), (StudentSize::Medium, 300, 600), (StudentSize::Large, 500, 1000)] {
        let s = Student::with_size(40, size, 256, 1, 2);
        let n = s.trainable_count();
        ok &= n == oracle(h, d) && s.dims.param_count() == n;
        parts.push(format!("{size}={n}"));
    }
    report.record(7, ok, format!("trainable counts {}", parts.join(" ")));
}

fn structure(report: &mut Report) {
    let dims = TeacherDims {
        word_dim: 8,
        encoder_hidden: 8,
        context_dim: 12,
        style_tokens: 4,
        decoder_hidden: 16,
        frame_dim: 4,
    };
    let vocab = 20;
    let teacher = Teacher::new(vocab, dims, 3);
    let lm = LanguageModel::new(vocab, 8, 12, 4);
    let student = Student::new(
        vocab,
        itts_core::distill::StudentDims {
            table_dim: 10,
            hidden: 6,
            dense: 8,
            context_dim: 12,
        },
        5,
        6,
    );
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: Some(&lm),
        student: Some(&student),
        sampler: &sampler,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sentence = |rng: &mut ChaCha8Rng| {
        let m = rng.random_range(1..=12);
        Sentence::new((0..m).map(|_| rng.random_range(2..vocab)).collect()).unwrap()
    };
    let mut length_ok = 0;
    for case in 0..1000 {
        let s = sentence(&mut rng);
        let cfg = PipelineConfig {
            segment_words: rng.random_range(1..=3),
            delta: rng.random_range(0..=3),
            policy: Policy::STANDARD[case % Policy::STANDARD.len()],
            max_frames: 5,
        };
        let r = incremental_synthesize(&s, &cfg, &models).unwrap();
        let expected: usize = r.segments.iter().map(|g| g.frames.rows() + cfg.delta).sum();
        length_ok += usize::from(r.frames.rows() == expected);
    }
    let causal_policies = [Policy::Independent, Policy::Unicontext, Policy::TeacherLm, Policy::Student];
    let mut causal_ok = 0;
    for case in 0..100 {
        let s = loop {
            let s = sentence(&mut rng);
            if s.len() >= 3 {
                break s;
            }
        };
        let cfg = PipelineConfig {
            policy: causal_policies[case % causal_policies.len()],
            max_frames: 5,
            ..Default::default()
        };
        let t = rng.random_range(1..s.len().div_ceil(2));
        let mut words = s.words().to_vec();
        for w in &mut words[2 * t..] {
            *w = rng.random_range(2..vocab);
        }
        let a = incremental_synthesize(&s, &cfg, &models).unwrap();
        let b = incremental_synthesize(&Sentence::new(words).unwrap(), &cfg, &models).unwrap();
        causal_ok += usize::from((0..t).all(|i| a.segments[i].frames == b.segments[i].frames));
    }
    report.record(
        6,
        length_ok == 1000 && causal_ok == 100,
        format!("length identity {length_ok}/1000, causality {causal_ok}/100"),
    );
}

fn determinism(report: &mut Report, root: &Path) {
    let a = root.join("rerun_a");
    let b = root.join("rerun_b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let cfg = write_config(root, TINY);
    let c = cfg.to_str().unwrap();
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for step in CHAIN {
        let name = if step.len() == 2 { "distill-truth" } else { step[0] };
        let mut args = step.to_vec();
        args.extend(["--config", c]);
        timed(&a, &args);
        timed(&b, &args);
        let ma = json(&a.join(format!("manifest_{name}.json")));
        let mb = json(&b.join(format!("manifest_{name}.json")));
        for (k, v) in ma["outputs"].as_object().unwrap() {
            if v == "wall-clock" {
                continue;
            }
            compared += 1;
            let fa = std::fs::read(a.join(k)).unwrap();
            let fb = std::fs::read(b.join(k)).unwrap();
            if fa != fb || mb["outputs"][k] != *v {
                mismatched.push(format!("{name}/{k}"));
            }
        }
        if ma["inputs"] != mb["inputs"] {
            mismatched.push(format!("{name} inputs"));
        }
    }
    report.record(
        8,
        mismatched.is_empty() && compared > 0,
        format!("{compared} artifacts bit-identical across reruns, mismatches {mismatched:?}"),
    );
}

/// Per-seed run directory plus the wall time of the stages the quality
/// criterion depends on.
struct SeedRun {
    dir: PathBuf,
    quality_secs: f64,
    chain_secs: f64,
}

fn run_seed(root: &Path, seed: u64) -> SeedRun {
    let dir = root.join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let s = seed.to_string();
    let mut quality_secs = 0.0;
    let mut chain_secs = 0.0;
    for step in CHAIN {
        let mut args = step.to_vec();
        args.extend(["--seed", &s]);
        let secs = timed(&dir, &args).as_secs_f64();
        chain_secs += secs;
        if !matches!(step[0], "synth" | "sim-curve" | "bench-latency") && step.len() == 1 {
            quality_secs += secs;
        }
        eprintln!("seed {seed}: {:?} {secs:.1}s", step);
    }
    SeedRun {
        dir,
        quality_secs,
        chain_secs,
    }
}

fn similarity(report: &mut Report, runs: &[SeedRun]) {
    let mut per_t: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (run, seed) in runs.iter().zip(SEEDS) {
        let v = json(&run.dir.join(format!("summary_similarity_{seed}.json")));
        for (mode, slot) in [("pseudo", 0), ("truth", 1)] {
            for p in v[mode]["points"].as_array().unwrap() {
                let e = per_t.entry(p["t"].as_u64().unwrap()).or_default();
                let m = p["mean"].as_f64().unwrap();
                if slot == 0 {
                    e.0.push(m);
                } else {
                    e.1.push(m);
                }
            }
        }
    }
    let mut ok = !per_t.is_empty();
    let mut parts = Vec::new();
    for (t, (p, q)) in per_t {
        // Populated: the bucket exists for every seed in both modes.
        if p.len() < runs.len() || q.len() < runs.len() {
            continue;
        }
        let (mp, mq) = (median(p), median(q));
        ok &= mp > mq;
        parts.push(format!("t{t} {mp:.4}>{mq:.4}"));
    }
    report.record(3, ok, format!("median pseudo vs truth: {}", parts.join(", ")));
}

fn quality(report: &mut Report, runs: &[SeedRun]) {
    let mut per_policy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (run, seed) in runs.iter().zip(SEEDS) {
        let v = json(&run.dir.join(format!("summary_quality_{seed}.json")));
        for p in v["policies"].as_array().unwrap() {
            per_policy
                .entry(p["policy"].as_str().unwrap().to_string())
                .or_default()
                .push(p["frame_mse"].as_f64().unwrap());
        }
    }
    let m = |k: &str| median(per_policy[k].clone());
    let (full, tlm, stu, uni, ind) = (m("lookahead_full"), m("teacher_lm"), m("student"), m("unicontext"), m("independent"));
    let secs: f64 = runs.iter().map(|r| r.quality_secs).sum();
    let pass = full <= tlm && stu < uni && uni < ind && stu <= 1.25 * tlm && secs < 1200.0;
    report.record(
        5,
        pass,
        format!(
            "median MSE full {full:.5} teacher_lm {tlm:.5} student {stu:.5} unicontext {uni:.5} independent {ind:.5}; {secs:.0}s"
        ),
    );
}

fn latency(report: &mut Report, run: &SeedRun, seed: u64) {
    let v = json(&run.dir.join(format!("summary_latency_{seed}.json")));
    let mut fin = BTreeMap::new();
    for p in v["policies"].as_array().unwrap() {
        fin.insert(
            p["policy"].as_str().unwrap().to_string(),
            (p["final_t"].as_u64().unwrap(), p["final_cumulative_ms"].as_f64().unwrap()),
        );
    }
    let (tt, tlm) = fin["teacher_lm"];
    let (ts, stu) = fin["student"];
    let (tu, uni) = fin["unicontext"];
    let same_t = tt == ts && ts == tu;
    let pass = same_t && v["repetitions"] == 5 && tlm > 5.0 * stu && stu <= 2.0 * uni;
    report.record(
        4,
        pass,
        format!(
            "final t={ts}: teacher_lm {tlm:.2} ms ({:.1}x student), student {stu:.2} ms ({:.2}x unicontext {uni:.2} ms), median of 5",
            tlm / stu,
            stu / uni
        ),
    );
}

fn smoke(report: &mut Report, run: &SeedRun, seed: u64) {
    let expected = [
        format!("summary_quality_{seed}.json"),
        format!("summary_latency_{seed}.json"),
        format!("summary_similarity_{seed}.json"),
        format!("report_similarity_pseudo_{seed}.csv"),
        format!("report_similarity_truth_{seed}.csv"),
        "frames_student.bin".to_string(),
    ];
    let mut missing: Vec<String> = expected.iter().filter(|f| !run.dir.join(f).is_file()).cloned().collect();
    for p in Policy::STANDARD {
        for kind in ["quality", "latency"] {
            let f = format!("report_{kind}_{p}_{seed}.csv");
            if !run.dir.join(&f).is_file() {
                missing.push(f);
            }
        }
    }
    for step in CHAIN {
        let name = if step.len() == 2 { "distill-truth" } else { step[0] };
        let f = format!("manifest_{name}.json");
        if !run.dir.join(&f).is_file() {
            missing.push(f);
        }
    }
    report.record(
        9,
        missing.is_empty() && run.chain_secs < 900.0,
        format!("default chain {:.0}s, missing reports {missing:?}", run.chain_secs),
    );
}

fn convergence(report: &mut Report, run: &SeedRun, seed: u64) {
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let vocab = Vocabulary::load(&run.dir.join("vocab.txt")).unwrap();
    let mut all = read_corpus(&run.dir.join("corpus.txt"), &vocab).unwrap();
    let held = all.split_off(all.len() - cfg.corpus.heldout);
    let teacher = Teacher::load(&run.dir.join("teacher.ckpt")).unwrap();
    let lm = LanguageModel::load(&run.dir.join("lm.ckpt")).unwrap();
    let source = TargetSource::Pseudo {
        lm: &lm,
        sampler: &cfg.sampler,
    };
    let dcfg = DistillConfig {
        lambda: 1.0,
        size: StudentSize::Medium,
        iterations: 2000,
        ..cfg.distill.clone()
    };
    let stage = cfg.seeds().distill;
    let examples = build_examples(&teacher, &held[..100], &source, dcfg.window, dcfg.hop, 17).unwrap();
    let init = Student::with_size(
        teacher.vocab_len,
        StudentSize::Medium,
        teacher.context_dim(),
        itts_core::seed::derive_seed(stage, "distill.table"),
        stage,
    );
    let before = mean_distil_loss(&init, &examples).unwrap();
    let t = Instant::now();
    let (student, _) = train_student(
        &teacher,
        &lm,
        &cfg.sampler,
        &all,
        None,
        &dcfg,
        &cfg.adam(dcfg.learning_rate),
        stage,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let after = mean_distil_loss(&student, &examples).unwrap();
    report.record(
        2,
        after <= 0.2 * before && secs < 300.0,
        format!(
            "medium student held-out distil loss {before:.4} -> {after:.4} ({:.1}%), {secs:.0}s",
            100.0 * after / before
        ),
    );
}

fn main() {
    // `cargo test -- --list` and filters should not start a half-hour run.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let keep = std::env::var_os("ITTS_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();
    let mut report = Report { lines: Vec::new() };

    gradients(&mut report);
    closed_form(&mut report);
    structure(&mut report);
    determinism(&mut report, &root);

    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(&root, s)).collect();
    convergence(&mut report, &runs[0], SEEDS[0]);
    similarity(&mut report, &runs);
    latency(&mut report, &runs[0], SEEDS[0]);
    quality(&mut report, &runs);
    smoke(&mut report, &runs[0], SEEDS[0]);

    report.lines.sort_by_key(|(_, l)| l[7..].split(':').next().map(str::to_string));
    println!("\nacceptance summary");
    for (_, line) in &report.lines {
        println!("{line}");
    }
    let failed = report.lines.iter().filter(|(p, _)| !p).count();
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
