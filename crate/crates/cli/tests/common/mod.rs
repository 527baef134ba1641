#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small config that runs the whole chain in seconds.
pub const TINY: &str = r#"
seed = 5

[corpus]
vocab_size = 24
sentences = 260
heldout = 20
min_len = 4
max_len = 8

[lm]
iterations = 20
batch_size = 8

[teacher]
phase1_iterations = 6
phase2_iterations = 2
batch_size = 4
decoder_hidden = 32
encoder_hidden = 16
word_dim = 16
context_dim = 32

[distill]
iterations = 6
batch_size = 4
log_every = 2

[bench]
test_sentences = 6
latency_sentences = 3
repetitions = 2
lm_cost_layers = 1
lm_cost_width = 16
"#;

pub fn itts(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itts"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) {
    let out = itts(dir, args);
    assert!(
        out.status.success(),
        "itts {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Subcommands of the chain, in order.
pub const CHAIN: &[&[&str]] = &[
    &["gen-corpus"],
    &["train-lm"],
    &["train-teacher"],
    &["distill"],
    &["distill", "--without-lm"],
    &["synth"],
    &["bench-quality"],
    &["sim-curve"],
    &["bench-latency"],
];

/// Runs the chain with `config` into `dir`.
pub fn run_chain(dir: &Path, config: &Path) {
    let c = config.to_str().unwrap();
    for step in CHAIN {
        let mut args: Vec<&str> = step.to_vec();
        args.extend(["--config", c]);
        ok(dir, &args);
    }
}
