mod common;

use common::*;
use itts_core::corpus::{Sentence, EOS};
use itts_core::lm::SamplerConfig;
use itts_core::pipeline::{incremental_synthesize, Models, PipelineConfig, Policy};
use itts_core::segment::segment_sentence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sentence(rng: &mut ChaCha8Rng) -> Sentence {
    let m = rng.random_range(4..=12);
    Sentence::new((0..m).map(|_| rng.random_range(2..VOCAB)).collect()).unwrap()
}

#[test]
fn non_lookahead_steps_ignore_future_words() {
    let (teacher, lm, student) = tiny_models(11);
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: Some(&lm),
        student: Some(&student),
        sampler: &sampler,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policies = [Policy::Independent, Policy::Unicontext, Policy::TeacherLm, Policy::Student];
    for case in 0..100 {
        let s = random_sentence(&mut rng);
        let n = rng.random_range(1..=3);
        let segs = segment_sentence(&s, n).unwrap();
        if segs.len() < 2 {
            continue;
        }
        let t = rng.random_range(1..segs.len());
        let cut = segs[t - 1].end();
        let mut words = s.words().to_vec();
        for w in &mut words[cut..] {
            *w = rng.random_range(2..VOCAB);
        }
        let changed = Sentence::new(words).unwrap();
        let policy = policies[case % policies.len()];
        let cfg = PipelineConfig {
            segment_words: n,
            policy,
            max_frames: 6,
            ..Default::default()
        };
        let a = incremental_synthesize(&s, &cfg, &models).unwrap();
        let b = incremental_synthesize(&changed, &cfg, &models).unwrap();
        for i in 0..t {
            assert_eq!(a.segments[i].frames, b.segments[i].frames, "{policy} case {case} step {}", i + 1);
        }
    }
}

#[test]
fn lookahead_full_does_see_the_future() {
    let (teacher, _, _) = tiny_models(12);
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: None,
        student: None,
        sampler: &sampler,
    };
    let s = Sentence::new(vec![2, 3, 4, 5, 6, 7]).unwrap();
    let changed = Sentence::new(vec![2, 3, 9, 9, 9, 9]).unwrap();
    let cfg = PipelineConfig {
        policy: Policy::LookaheadFull,
        max_frames: 6,
        ..Default::default()
    };
    let a = incremental_synthesize(&s, &cfg, &models).unwrap();
    let b = incremental_synthesize(&changed, &cfg, &models).unwrap();
    assert_ne!(a.segments[0].frames, b.segments[0].frames);
    assert!(!s.words().contains(&EOS));
}

#[test]
fn student_policy_matches_manual_predict_and_decode() {
    let (teacher, _, student) = tiny_models(13);
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: None,
        student: Some(&student),
        sampler: &sampler,
    };
    let s = Sentence::new(vec![5, 6, 7, 8, 9]).unwrap();
    let cfg = PipelineConfig {
        policy: Policy::Student,
        max_frames: 6,
        ..Default::default()
    };
    let out = incremental_synthesize(&s, &cfg, &models).unwrap();
    for (i, seg) in segment_sentence(&s, 2).unwrap().iter().enumerate() {
        let e = student.predict(&s.words()[..seg.end()]).unwrap();
        let cur = teacher.encode(&seg.words).unwrap();
        let manual = teacher.decode_segment(&cur, &e, 6).unwrap();
        assert_eq!(manual.frames, out.segments[i].frames);
    }
}

#[test]
fn policies_without_their_models_are_rejected() {
    let (teacher, _, _) = tiny_models(14);
    let sampler = SamplerConfig::default();
    let models = Models {
        teacher: &teacher,
        lm: None,
        student: None,
        sampler: &sampler,
    };
    let s = Sentence::new(vec![2, 3, 4, 5]).unwrap();
    for policy in [Policy::TeacherLm, Policy::Student] {
        let cfg = PipelineConfig {
            policy,
            ..Default::default()
        };
        assert!(incremental_synthesize(&s, &cfg, &models).is_err());
    }
}
