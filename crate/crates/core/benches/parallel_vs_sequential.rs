//! Per-sentence synthesis over a batch of held-out sentences, run through the
//! sequential map and (with the `parallel` feature) the rayon map.

use criterion::{criterion_group, criterion_main, Criterion};

use itts_core::corpus::generate_corpus;
use itts_core::lm::SamplerConfig;
use itts_core::par;
use itts_core::pipeline::{incremental_synthesize, Models, PipelineConfig, Policy};
use itts_core::tts::{Teacher, TeacherDims};

fn bench(c: &mut Criterion) {
    let corpus = generate_corpus(7, 64, 32, (4, 14)).unwrap();
    let teacher = Teacher::new(corpus.vocab.len(), TeacherDims::default(), 7);
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: None,
        student: None,
        sampler: &sampler,
    };
    let cfg = PipelineConfig {
        policy: Policy::LookaheadFull,
        ..Default::default()
    };
    let run = |s: &_| incremental_synthesize(s, &cfg, &models).unwrap().frames.rows();

    let mut g = c.benchmark_group("synthesize_32_sentences");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(&corpus.sentences, run)));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| par::map_parallel(&corpus.sentences, run)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
