//! Subcommand implementations for the `itts` binary.
//!
//! Every subcommand reads its inputs from the output directory, writes its
//! artifacts there and records a `manifest_<name>.json` with the config hash,
//! seed and SHA-256 of every input and output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use itts_core::config::{ExperimentConfig, Manifest};
use itts_core::corpus::{generate_corpus, read_corpus, write_corpus, FrameOracle, Sentence, Vocabulary};
use itts_core::distill::{train_student, train_student_without_lm, Student, TargetSource};
use itts_core::eval::{latency_benchmark, quality_report, similarity_curve};
use itts_core::lm::{train_lm, CostEmulator, LanguageModel};
use itts_core::pipeline::{incremental_synthesize, write_frames, Models, Policy};
use itts_core::tts::{train_teacher, Teacher};
use itts_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "itts", version, about = "Incremental segment-by-segment frame synthesis experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Synthesis policy (independent, unicontext, lookahead_<k>, lookahead_full, teacher_lm, student).
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Student size class.
    #[arg(long, global = true)]
    pub size: Option<String>,
    /// Weight of the teacher-student loss.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenCorpus,
    /// Train the word language model.
    TrainLm,
    /// Train the teacher (ground-truth lookahead, then LM lookahead).
    TrainTeacher,
    /// Distill a student from the frozen teacher.
    Distill {
        /// Use the true future instead of LM samples for teacher targets.
        #[arg(long)]
        without_lm: bool,
    },
    /// Synthesize one sentence incrementally.
    Synth {
        /// Space-separated words; defaults to the first held-out sentence.
        #[arg(long)]
        sentence: Option<String>,
    },
    /// Time the policies step by step.
    BenchLatency,
    /// Frame error and stop accuracy of the policies against the oracle.
    BenchQuality,
    /// Student-teacher cosine similarity per step, with and without the LM.
    SimCurve,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainLm => "train-lm",
            Command::TrainTeacher => "train-teacher",
            Command::Distill { without_lm: false } => "distill",
            Command::Distill { without_lm: true } => "distill-truth",
            Command::Synth { .. } => "synth",
            Command::BenchLatency => "bench-latency",
            Command::BenchQuality => "bench-quality",
            Command::SimCurve => "sim-curve",
        }
    }
}

pub const VOCAB: &str = "vocab.txt";
pub const CORPUS: &str = "corpus.txt";
pub const LM: &str = "lm.ckpt";
pub const TEACHER: &str = "teacher.ckpt";
pub const STUDENT: &str = "student.ckpt";
pub const STUDENT_TRUTH: &str = "student_truth.ckpt";

/// Resolved configuration plus the output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub overrides: BTreeMap<String, String>,
}

impl Workspace {
    pub fn open(args: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides = BTreeMap::new();
        if let Some(seed) = args.seed {
            cfg.seed = seed;
            overrides.insert("seed".into(), seed.to_string());
        }
        if let Some(out) = &args.out {
            cfg.out_dir = out.clone();
        }
        if cfg.out_dir.as_os_str().is_empty() {
            cfg.out_dir = PathBuf::from("run");
        }
        if let Some(size) = &args.size {
            cfg.distill.size = size.parse()?;
            overrides.insert("size".into(), size.clone());
        }
        if let Some(l) = args.lambda {
            cfg.distill.lambda = l;
            overrides.insert("lambda".into(), l.to_string());
        }
        if let Some(p) = &args.policy {
            cfg.pipeline.policy = p.parse()?;
            overrides.insert("policy".into(), p.clone());
        }
        // The output location does not affect any artifact.
        let dir = std::mem::take(&mut cfg.out_dir);
        cfg.validate()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { cfg, dir, overrides })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an upstream artifact, or an error naming its producer.
    pub fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                producer: format!("itts {producer}"),
            })
        }
    }

    fn manifest(&self, name: &str) -> Manifest {
        let mut m = Manifest::new(name, &self.cfg);
        m.overrides = self.overrides.clone();
        m
    }

    fn finish(&self, mut m: Manifest, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        for p in inputs {
            m.add_input(&self.dir, p)?;
        }
        for p in outputs {
            m.add_output(&self.dir, p)?;
        }
        m.write(&self.path(&format!("manifest_{}.json", m.subcommand)))
    }

    fn oracle(&self, vocab: &Vocabulary) -> Result<FrameOracle> {
        let c = &self.cfg.corpus;
        FrameOracle::new(vocab.len(), c.frames_per_word, c.frame_dim, self.cfg.seeds().oracle)
    }

    /// Vocabulary plus the (train, held-out) split.
    fn corpus(&self) -> Result<(Vocabulary, Vec<Sentence>, Vec<Sentence>, [PathBuf; 2])> {
        let vp = self.require(VOCAB, "gen-corpus")?;
        let cp = self.require(CORPUS, "gen-corpus")?;
        let vocab = Vocabulary::load(&vp)?;
        let mut all = read_corpus(&cp, &vocab)?;
        let held = self.cfg.corpus.heldout;
        if held >= all.len() {
            return Err(Error::Config(format!(
                "corpus has {} sentences but corpus.heldout is {held}",
                all.len()
            )));
        }
        let test = all.split_off(all.len() - held);
        Ok((vocab, all, test, [vp, cp]))
    }

    fn lm(&self) -> Result<(LanguageModel, PathBuf)> {
        let p = self.require(LM, "train-lm")?;
        Ok((LanguageModel::load(&p)?, p))
    }

    fn teacher(&self) -> Result<(Teacher, PathBuf)> {
        let p = self.require(TEACHER, "train-teacher")?;
        Ok((Teacher::load(&p)?, p))
    }

    fn student(&self, truth: bool) -> Result<(Student, PathBuf)> {
        let (name, producer) = if truth {
            (STUDENT_TRUTH, "distill --without-lm")
        } else {
            (STUDENT, "distill")
        };
        let p = self.require(name, producer)?;
        Ok((Student::load(&p)?, p))
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        self.write(name, &(serde_json::to_string_pretty(value).expect("json") + "\n"))
    }
}

fn progress_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Runs one subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let ws = Workspace::open(&cli.global)?;
    let name = cli.command.name();
    log::info!("{name}: writing to {}", ws.dir.display());
    match &cli.command {
        Command::GenCorpus => gen_corpus(&ws),
        Command::TrainLm => cmd_train_lm(&ws),
        Command::TrainTeacher => cmd_train_teacher(&ws),
        Command::Distill { without_lm } => cmd_distill(&ws, *without_lm),
        Command::Synth { sentence } => cmd_synth(&ws, sentence.as_deref()),
        Command::BenchLatency => cmd_bench_latency(&ws, cli.global.policy.is_some()),
        Command::BenchQuality => cmd_bench_quality(&ws, cli.global.policy.is_some()),
        Command::SimCurve => cmd_sim_curve(&ws),
    }
}

fn gen_corpus(ws: &Workspace) -> Result<()> {
    let c = &ws.cfg.corpus;
    let corpus = generate_corpus(ws.cfg.seeds().corpus, c.vocab_size, c.sentences, (c.min_len, c.max_len))?;
    let vp = ws.path(VOCAB);
    let cp = ws.path(CORPUS);
    corpus.vocab.save(&vp)?;
    write_corpus(&cp, &corpus.vocab, &corpus.sentences)?;
    ws.finish(ws.manifest("gen-corpus"), &[], &[&vp, &cp])
}

fn cmd_train_lm(ws: &Workspace) -> Result<()> {
    let (vocab, train, test, inputs) = ws.corpus()?;
    let cfg = &ws.cfg.lm;
    let (lm, log) = train_lm(&train, vocab.len(), cfg, &ws.cfg.adam(cfg.learning_rate), ws.cfg.seeds().lm)?;
    let heldout = lm.mean_loss(&test)?;
    log::info!("train-lm: held-out cross-entropy {heldout:.4}");
    let p = ws.path(LM);
    lm.save(&p)?;
    let csv = ws.write(
        "lm_progress.csv",
        &progress_csv("iteration,loss", log.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}"))),
    )?;
    ws.finish(ws.manifest("train-lm"), &[&inputs[0], &inputs[1]], &[&p, &csv])
}

fn cmd_train_teacher(ws: &Workspace) -> Result<()> {
    let (vocab, train, _, inputs) = ws.corpus()?;
    let cfg = &ws.cfg.teacher;
    let (lm, lm_path) = if cfg.phase2_iterations > 0 {
        let (lm, p) = ws.lm()?;
        (Some(lm), Some(p))
    } else {
        (None, None)
    };
    let oracle = ws.oracle(&vocab)?;
    let (teacher, log) = train_teacher(
        &train,
        vocab.len(),
        &oracle,
        lm.as_ref(),
        cfg,
        &ws.cfg.sampler,
        &ws.cfg.adam(cfg.learning_rate),
        ws.cfg.seeds().teacher,
    )?;
    let p = ws.path(TEACHER);
    teacher.save(&p)?;
    let rows = log
        .phase1
        .iter()
        .map(|l| (1, l))
        .chain(log.phase2.iter().map(|l| (2, l)))
        .enumerate()
        .map(|(i, (ph, l))| format!("{i},{ph},{l}"));
    let csv = ws.write("teacher_progress.csv", &progress_csv("iteration,phase,loss", rows))?;
    let mut ins: Vec<&Path> = vec![&inputs[0], &inputs[1]];
    if let Some(p) = &lm_path {
        ins.push(p);
    }
    ws.finish(ws.manifest("train-teacher"), &ins, &[&p, &csv])
}

fn cmd_distill(ws: &Workspace, without_lm: bool) -> Result<()> {
    let (vocab, train, _, inputs) = ws.corpus()?;
    let (teacher, tp) = ws.teacher()?;
    let cfg = &ws.cfg.distill;
    let oracle = ws.oracle(&vocab)?;
    let adam = ws.cfg.adam(cfg.learning_rate);
    let seed = ws.cfg.seeds().distill;
    let mut ins: Vec<PathBuf> = vec![inputs[0].clone(), inputs[1].clone(), tp];
    let (student, log) = if without_lm {
        train_student_without_lm(&teacher, ws.cfg.sampler.max_len, &train, Some(&oracle), cfg, &adam, seed)?
    } else {
        let (lm, lp) = ws.lm()?;
        ins.push(lp);
        train_student(&teacher, &lm, &ws.cfg.sampler, &train, Some(&oracle), cfg, &adam, seed)?
    };
    let (ckpt, csv_name) = if without_lm {
        (STUDENT_TRUTH, "distill_truth_progress.csv")
    } else {
        (STUDENT, "distill_progress.csv")
    };
    let p = ws.path(ckpt);
    student.save(&p, cfg.lambda)?;
    let csv = ws.write(csv_name, &log.to_csv())?;
    let ins: Vec<&Path> = ins.iter().map(PathBuf::as_path).collect();
    ws.finish(ws.manifest(if without_lm { "distill-truth" } else { "distill" }), &ins, &[&p, &csv])
}

/// Loaded models for a set of policies, plus the files they came from.
struct Loaded {
    teacher: Teacher,
    lm: Option<LanguageModel>,
    student: Option<Student>,
    inputs: Vec<PathBuf>,
}

impl Loaded {
    fn for_policies(ws: &Workspace, policies: &[Policy]) -> Result<Self> {
        let (teacher, tp) = ws.teacher()?;
        let mut inputs = vec![tp];
        let lm = if policies.contains(&Policy::TeacherLm) {
            let (lm, p) = ws.lm()?;
            inputs.push(p);
            Some(lm)
        } else {
            None
        };
        let student = if policies.contains(&Policy::Student) {
            let (s, p) = ws.student(false)?;
            inputs.push(p);
            Some(s)
        } else {
            None
        };
        Ok(Loaded {
            teacher,
            lm,
            student,
            inputs,
        })
    }

    fn models<'a>(&'a self, ws: &'a Workspace) -> Models<'a> {
        Models {
            teacher: &self.teacher,
            lm: self.lm.as_ref(),
            student: self.student.as_ref(),
            sampler: &ws.cfg.sampler,
        }
    }
}

fn selected_policies(ws: &Workspace, explicit: bool) -> Vec<Policy> {
    if explicit {
        vec![ws.cfg.pipeline.policy]
    } else {
        Policy::STANDARD.to_vec()
    }
}

fn cmd_synth(ws: &Workspace, sentence: Option<&str>) -> Result<()> {
    let (vocab, _, test, inputs) = ws.corpus()?;
    let s = match sentence {
        Some(text) => Sentence::new(vocab.encode_line(text))?,
        None => test[0].clone(),
    };
    let policy = ws.cfg.pipeline.policy;
    let loaded = Loaded::for_policies(ws, &[policy])?;
    let result = incremental_synthesize(&s, &ws.cfg.pipeline, &loaded.models(ws))?;
    for t in result.runaway_steps() {
        log::warn!("synth: segment {t} reached the frame cap");
    }
    let fp = ws.path(&format!("frames_{policy}.bin"));
    write_frames(&fp, &result.frames, result.delta, policy)?;
    // Wall-clock timings differ between runs; only the frames are hashed.
    ws.write(&format!("timings_{policy}.csv"), &result.timings_csv())?;
    let mut ins: Vec<&Path> = vec![&inputs[0], &inputs[1]];
    ins.extend(loaded.inputs.iter().map(PathBuf::as_path));
    ws.finish(ws.manifest("synth"), &ins, &[&fp])
}

fn cmd_bench_quality(ws: &Workspace, explicit: bool) -> Result<()> {
    let (vocab, _, test, inputs) = ws.corpus()?;
    let test = &test[..ws.cfg.bench.test_sentences];
    let policies = selected_policies(ws, explicit);
    let loaded = Loaded::for_policies(ws, &policies)?;
    let oracle = ws.oracle(&vocab)?;
    let report = quality_report(&policies, test, &loaded.models(ws), &ws.cfg.pipeline, &oracle)?;
    let seed = ws.cfg.seed;
    let mut outs = Vec::new();
    for q in &report {
        let rows = q.per_sentence.iter().enumerate().map(|(i, m)| format!("{i},{m}"));
        outs.push(ws.write(
            &format!("report_quality_{}_{seed}.csv", q.policy),
            &progress_csv("sentence,frame_mse", rows),
        )?);
    }
    let summary: Vec<_> = report
        .iter()
        .map(|q| {
            json!({
                "policy": q.policy.to_string(),
                "frame_mse": q.frame_mse,
                "stop_accuracy": q.stop_accuracy,
                "runaway_segments": q.runaway_segments,
                "sentences": q.sentences,
            })
        })
        .collect();
    outs.push(ws.write_json(
        &format!("summary_quality_{seed}.json"),
        &json!({ "kind": "quality", "seed": seed, "policies": summary }),
    )?);
    let mut ins: Vec<&Path> = vec![&inputs[0], &inputs[1]];
    ins.extend(loaded.inputs.iter().map(PathBuf::as_path));
    let outs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    ws.finish(ws.manifest("bench-quality"), &ins, &outs)
}

fn cmd_bench_latency(ws: &Workspace, explicit: bool) -> Result<()> {
    let (_, _, test, inputs) = ws.corpus()?;
    let b = &ws.cfg.bench;
    let test = &test[..b.latency_sentences];
    let policies = selected_policies(ws, explicit);
    let mut loaded = Loaded::for_policies(ws, &policies)?;
    if let Some(lm) = loaded.lm.as_mut() {
        if b.lm_cost_layers > 0 {
            let hidden = lm.hidden();
            lm.set_cost_emulator(Some(CostEmulator::new(hidden, b.lm_cost_layers, b.lm_cost_width, ws.cfg.seeds().eval)));
        }
    }
    let report = latency_benchmark(&policies, test, &loaded.models(ws), &ws.cfg.pipeline, b.repetitions)?;
    for w in &report.warnings {
        log::warn!("bench-latency: {w}");
    }
    let seed = ws.cfg.seed;
    let mut outs = Vec::new();
    for tr in &report.traces {
        outs.push(ws.write(&format!("report_latency_{}_{seed}.csv", tr.policy), &tr.to_csv())?);
    }
    let summary: Vec<_> = report
        .traces
        .iter()
        .map(|tr| {
            let f = tr.final_point();
            json!({
                "policy": tr.policy.to_string(),
                "wpm": tr.wpm,
                "final_t": f.map(|p| p.t),
                "final_cumulative_ms": f.map(|p| p.cumulative_ms),
                "rep_seconds": tr.rep_seconds,
            })
        })
        .collect();
    outs.push(ws.write_json(
        &format!("summary_latency_{seed}.json"),
        &json!({
            "kind": "latency",
            "seed": seed,
            "repetitions": report.repetitions,
            "lm_cost_layers": b.lm_cost_layers,
            "lm_cost_width": b.lm_cost_width,
            "warnings": report.warnings,
            "policies": summary,
        }),
    )?);
    let mut ins: Vec<&Path> = vec![&inputs[0], &inputs[1]];
    ins.extend(loaded.inputs.iter().map(PathBuf::as_path));
    // Timings vary run to run, so outputs are listed without hashes.
    let mut m = ws.manifest("bench-latency");
    for p in &ins {
        m.add_input(&ws.dir, p)?;
    }
    for p in &outs {
        m.outputs.insert(
            p.strip_prefix(&ws.dir).unwrap_or(p).display().to_string(),
            "wall-clock".into(),
        );
    }
    m.write(&ws.path("manifest_bench-latency.json"))
}

fn cmd_sim_curve(ws: &Workspace) -> Result<()> {
    let (_, _, test, inputs) = ws.corpus()?;
    let test = &test[..ws.cfg.bench.test_sentences];
    let (teacher, tp) = ws.teacher()?;
    let (lm, lp) = ws.lm()?;
    let (sp, spp) = ws.student(false)?;
    let (st, stp) = ws.student(true)?;
    let sampler = &ws.cfg.sampler;
    let n = ws.cfg.pipeline.segment_words;
    let seed = ws.cfg.seeds().eval;
    let pseudo = similarity_curve(&sp, &teacher, &TargetSource::Pseudo { lm: &lm, sampler }, test, n, seed)?;
    let truth = similarity_curve(&st, &teacher, &TargetSource::Truth { max_len: sampler.max_len }, test, n, seed)?;
    let s = ws.cfg.seed;
    let a = ws.write(&format!("report_similarity_pseudo_{s}.csv"), &pseudo.to_csv())?;
    let b = ws.write(&format!("report_similarity_truth_{s}.csv"), &truth.to_csv())?;
    let above = pseudo
        .points
        .iter()
        .all(|p| truth.mean_at(p.t).is_none_or(|q| p.mean > q));
    let c = ws.write_json(
        &format!("summary_similarity_{s}.json"),
        &json!({ "kind": "similarity", "seed": s, "pseudo": pseudo, "truth": truth, "pseudo_above_truth": above }),
    )?;
    ws.finish(
        ws.manifest("sim-curve"),
        &[&inputs[0], &inputs[1], &tp, &lp, &spp, &stp],
        &[&a, &b, &c],
    )
}
