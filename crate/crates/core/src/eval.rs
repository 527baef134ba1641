//! Analyses: embedding similarity per step, latency traces and frame-domain
//! quality per policy.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{FrameOracle, Sentence};
use crate::distill::{lookahead_for, Student, TargetSource};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::par;
use crate::pipeline::{incremental_synthesize, Models, PipelineConfig, Policy, SynthesisResult};
use crate::seed;
use crate::segment::{segment_sentence, Window};
use crate::tts::Teacher;

/// Buckets with fewer samples are dropped from curves.
pub const MIN_BUCKET: usize = 10;

/// `a.b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", "b", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub points: Vec<CurvePoint>,
}

impl SimilarityCurve {
    /// Groups `(t, value)` samples by `t`, dropping sparse buckets.
    pub fn from_samples(samples: &[(usize, f64)], min_count: usize) -> Self {
        let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &(t, v) in samples {
            buckets.entry(t).or_default().push(v);
        }
        let points = buckets
            .into_iter()
            .filter(|(_, v)| v.len() >= min_count)
            .map(|(t, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                CurvePoint {
                    t,
                    mean,
                    std: var.sqrt(),
                    count: v.len(),
                }
            })
            .collect();
        SimilarityCurve { points }
    }

    pub fn mean_at(&self, t: usize) -> Option<f64> {
        self.points.iter().find(|p| p.t == t).map(|p| p.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean,std,count\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.t, p.mean, p.std, p.count));
        }
        out
    }
}

/// Cosine similarity between the student's prediction and the teacher's
/// embedding at every incremental step of every test sentence. Targets take
/// their lookahead from `source`.
pub fn similarity_curve(
    student: &Student,
    teacher: &Teacher,
    source: &TargetSource<'_>,
    test: &[Sentence],
    segment_words: usize,
    seed_value: u64,
) -> Result<SimilarityCurve> {
    if test.is_empty() {
        return Err(Error::EmptyInput("similarity_curve"));
    }
    let per_sentence = par::map_range(test.len(), |i| -> Result<Vec<(usize, f64)>> {
        let s = &test[i];
        let mut out = Vec::new();
        for (k, seg) in segment_sentence(s, segment_words)?.iter().enumerate() {
            let win = Window {
                start: seg.start,
                end: seg.end(),
            };
            let mut rng = seed::item_rng(seed_value, "similarity", (i * 1000 + k) as u64);
            let future = lookahead_for(s, &win, source, &mut rng)?;
            let e_t = teacher.context_for(&s.words()[..seg.start], &future)?;
            let e_s = student.predict(&s.words()[..seg.end()])?;
            out.push((k + 1, cosine_similarity(&e_s, &e_t)?));
        }
        Ok(out)
    });
    let mut samples = Vec::new();
    for p in per_sentence {
        samples.extend(p?);
    }
    Ok(SimilarityCurve::from_samples(&samples, MIN_BUCKET))
}

/// Squared error between a predicted segment and its oracle frames, with
/// the shorter of the two zero-padded. Returns `(sum, aligned rows)`.
pub fn aligned_error(pred: &Tensor, oracle: &Tensor) -> (f64, usize) {
    let rows = pred.rows().max(oracle.rows());
    let mut sum = 0.0;
    for r in 0..rows {
        match (r < pred.rows(), r < oracle.rows()) {
            (true, true) => {
                sum += pred
                    .row(r)
                    .iter()
                    .zip(oracle.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            (true, false) => sum += pred.row(r).iter().map(|a| a * a).sum::<f64>(),
            (false, true) => sum += oracle.row(r).iter().map(|b| b * b).sum::<f64>(),
            (false, false) => unreachable!(),
        }
    }
    (sum, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceQuality {
    pub mse: f64,
    pub segments: usize,
    pub stop_hits: usize,
    pub runaways: usize,
}

/// Scores one synthesis against the oracle, segment by segment (the delta
/// padding frames are a concatenation artefact and are not scored).
pub fn score_synthesis(result: &SynthesisResult, s: &Sentence, oracle: &FrameOracle, segment_words: usize) -> Result<SentenceQuality> {
    let target = oracle.frames(s)?;
    let segs = segment_sentence(s, segment_words)?;
    if segs.len() != result.segments.len() {
        return Err(Error::dim("score_synthesis", "segments", segs.len(), result.segments.len()));
    }
    let (mut sum, mut rows, mut hits, mut runaways) = (0.0, 0, 0, 0);
    for (seg, pred) in segs.iter().zip(&result.segments) {
        let (truth, _) = target.segment(seg.start, seg.words.len());
        let (e, r) = aligned_error(&pred.frames, &truth);
        sum += e;
        rows += r;
        if pred.len().abs_diff(truth.rows()) <= 1 {
            hits += 1;
        }
        if pred.runaway {
            runaways += 1;
        }
    }
    Ok(SentenceQuality {
        mse: sum / (rows * oracle.dim) as f64,
        segments: segs.len(),
        stop_hits: hits,
        runaways,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyQuality {
    pub policy: Policy,
    /// Mean over sentences of the per-sentence frame MSE.
    pub frame_mse: f64,
    pub stop_accuracy: f64,
    pub runaway_segments: usize,
    pub sentences: usize,
    pub per_sentence: Vec<f64>,
}

/// Free-running incremental synthesis of every test sentence under each
/// policy, scored against the oracle.
pub fn quality_report(
    policies: &[Policy],
    test: &[Sentence],
    models: &Models<'_>,
    base: &PipelineConfig,
    oracle: &FrameOracle,
) -> Result<Vec<PolicyQuality>> {
    if test.is_empty() {
        return Err(Error::EmptyInput("quality_report"));
    }
    let mut out = Vec::with_capacity(policies.len());
    for &policy in policies {
        models.check(policy)?;
        let cfg = PipelineConfig {
            policy,
            ..base.clone()
        };
        let scored = par::map_range(test.len(), |i| {
            let r = incremental_synthesize(&test[i], &cfg, models)?;
            score_synthesis(&r, &test[i], oracle, cfg.segment_words)
        });
        let scored: Vec<SentenceQuality> = scored.into_iter().collect::<Result<_>>()?;
        let n = scored.len() as f64;
        let segs: usize = scored.iter().map(|q| q.segments).sum();
        out.push(PolicyQuality {
            policy,
            frame_mse: scored.iter().map(|q| q.mse).sum::<f64>() / n,
            stop_accuracy: scored.iter().map(|q| q.stop_hits).sum::<usize>() as f64 / segs as f64,
            runaway_segments: scored.iter().map(|q| q.runaways).sum(),
            sentences: scored.len(),
            per_sentence: scored.iter().map(|q| q.mse).collect(),
        });
    }
    Ok(out)
}

/// Words per minute for `words` synthesized in `seconds`.
pub fn words_per_minute(words: usize, seconds: f64) -> f64 {
    words as f64 / (seconds / 60.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub t: usize,
    /// Mean over sentences that reach step `t`, median over repetitions.
    pub cumulative_ms: f64,
    pub context_ms: f64,
    pub decode_ms: f64,
    pub words: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub policy: Policy,
    pub points: Vec<LatencyPoint>,
    /// Median over repetitions.
    pub wpm: f64,
    /// Per-repetition total wall-clock seconds.
    pub rep_seconds: Vec<f64>,
}

impl LatencyTrace {
    pub fn final_point(&self) -> Option<&LatencyPoint> {
        self.points.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,context_ms,decode_ms,cumulative_ms,words,count\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{}\n",
                p.t, p.context_ms, p.decode_ms, p.cumulative_ms, p.words, p.count
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub traces: Vec<LatencyTrace>,
    pub repetitions: usize,
    pub warnings: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of a sample (NaN when empty).
pub fn median_of(values: &[f64]) -> f64 {
    median(&mut values.to_vec())
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> std::time::Duration {
    let mut best = std::time::Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Runs every policy over `test` `repetitions` times on the calling thread.
/// Per-step times are averaged over sentences reaching that step, then the
/// median across repetitions is reported.
pub fn latency_benchmark(
    policies: &[Policy],
    test: &[Sentence],
    models: &Models<'_>,
    base: &PipelineConfig,
    repetitions: usize,
) -> Result<LatencyReport> {
    if test.is_empty() || repetitions == 0 {
        return Err(Error::EmptyInput("latency_benchmark"));
    }
    let mut warnings = Vec::new();
    let res = timer_resolution();
    if res > std::time::Duration::from_micros(1) {
        warnings.push(format!("timer resolution {res:?} is coarser than 1us"));
    }
    let mut traces = Vec::with_capacity(policies.len());
    for &policy in policies {
        models.check(policy)?;
        let cfg = PipelineConfig {
            policy,
            ..base.clone()
        };
        // reps x steps x (sum cumulative, sum context, sum decode, sum words, count)
        let mut per_rep: Vec<BTreeMap<usize, [f64; 5]>> = Vec::with_capacity(repetitions);
        let mut rep_seconds = Vec::with_capacity(repetitions);
        let mut rep_wpm = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let mut acc: BTreeMap<usize, [f64; 5]> = BTreeMap::new();
            let mut total_ms = 0.0;
            let mut words = 0;
            for s in test {
                let r = incremental_synthesize(s, &cfg, models)?;
                let mut w = 0;
                for (timing, seg) in r.timings.iter().zip(segment_sentence(s, cfg.segment_words)?) {
                    w += seg.words.len();
                    let a = acc.entry(timing.t).or_insert([0.0; 5]);
                    a[0] += timing.cumulative_ms;
                    a[1] += timing.context_ms;
                    a[2] += timing.decode_ms;
                    a[3] += w as f64;
                    a[4] += 1.0;
                }
                total_ms += r.timings.last().map(|t| t.cumulative_ms).unwrap_or(0.0);
                words += s.words().len();
            }
            rep_seconds.push(total_ms / 1e3);
            rep_wpm.push(words_per_minute(words, total_ms / 1e3));
            per_rep.push(acc);
        }
        let steps: Vec<usize> = per_rep[0].keys().copied().collect();
        let mut points = Vec::new();
        for t in steps {
            let count = per_rep[0][&t][4] as usize;
            if count < MIN_BUCKET.min(test.len()) {
                continue;
            }
            let col = |j: usize| -> f64 {
                let mut v: Vec<f64> = per_rep.iter().map(|m| m[&t][j] / m[&t][4]).collect();
                median(&mut v)
            };
            points.push(LatencyPoint {
                t,
                cumulative_ms: col(0),
                context_ms: col(1),
                decode_ms: col(2),
                words: col(3),
                count,
            });
        }
        traces.push(LatencyTrace {
            policy,
            points,
            wpm: median(&mut rep_wpm),
            rep_seconds,
        });
    }
    Ok(LatencyReport {
        traces,
        repetitions,
        warnings,
    })
}
