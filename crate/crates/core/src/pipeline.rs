//! Incremental synthesis: one segment at a time, each conditioned on a
//! context embedding resolved from what has been observed so far.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, WordId};
use crate::distill::Student;
use crate::error::{Error, Result};
use crate::lm::{sample_lookahead_with, LanguageModel, SamplerConfig};
use crate::nn::Tensor;
use crate::seed;
use crate::segment::segment_sentence;
use crate::tts::{FrameSegment, Teacher};

/// How the context embedding for each step is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Zero embedding.
    Independent,
    /// Past only.
    Unicontext,
    /// Past plus the next `k` true words.
    Lookahead(usize),
    /// Past plus the whole true future.
    LookaheadFull,
    /// Past plus an LM-sampled lookahead.
    TeacherLm,
    /// Distilled predictor on the observed words.
    Student,
}

impl Policy {
    pub const STANDARD: [Policy; 5] = [
        Policy::Independent,
        Policy::Unicontext,
        Policy::LookaheadFull,
        Policy::TeacherLm,
        Policy::Student,
    ];

    /// Whether the policy reads words beyond the current segment.
    pub fn sees_future(self) -> bool {
        matches!(self, Policy::Lookahead(_) | Policy::LookaheadFull)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Independent => f.write_str("independent"),
            Policy::Unicontext => f.write_str("unicontext"),
            Policy::Lookahead(k) => write!(f, "lookahead_{k}"),
            Policy::LookaheadFull => f.write_str("lookahead_full"),
            Policy::TeacherLm => f.write_str("teacher_lm"),
            Policy::Student => f.write_str("student"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "independent" => Policy::Independent,
            "unicontext" => Policy::Unicontext,
            "lookahead_full" => Policy::LookaheadFull,
            "teacher_lm" => Policy::TeacherLm,
            "student" => Policy::Student,
            _ => {
                let k = s
                    .strip_prefix("lookahead_")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown policy `{s}` (expected independent, unicontext, lookahead_<k>, lookahead_full, teacher_lm or student)"
                        ))
                    })?;
                if k == 0 {
                    return Err(Error::Config("lookahead_k needs k >= 1".into()));
                }
                Policy::Lookahead(k)
            }
        };
        Ok(p)
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Words per segment.
    pub segment_words: usize,
    /// Copies of each segment's last frame appended after it.
    pub delta: usize,
    pub policy: Policy,
    pub max_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segment_words: 2,
            delta: 1,
            policy: Policy::Student,
            max_frames: 32,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_words == 0 || self.max_frames == 0 {
            return Err(Error::Config("segment_words and max_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whatever the chosen policy needs. Unused slots may stay `None`.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub teacher: &'a Teacher,
    pub lm: Option<&'a LanguageModel>,
    pub student: Option<&'a Student>,
    pub sampler: &'a SamplerConfig,
}

impl Models<'_> {
    pub fn check(&self, policy: Policy) -> Result<()> {
        match policy {
            Policy::TeacherLm if self.lm.is_none() => {
                Err(Error::Config("policy teacher_lm needs a language model".into()))
            }
            Policy::Student if self.student.is_none() => {
                Err(Error::Config("policy student needs a student checkpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Context embedding for step `t` (1-based). `observed` is `w_1..w_Nt`,
/// `past_len` the number of words before the current segment and
/// `true_future` the words after it (read only by the lookahead policies).
pub fn resolve_context(
    policy: Policy,
    observed: &[WordId],
    past_len: usize,
    true_future: &[WordId],
    models: &Models<'_>,
    t: usize,
) -> Result<Option<Vec<f64>>> {
    models.check(policy)?;
    let teacher = models.teacher;
    let past = &observed[..past_len];
    let e = match policy {
        Policy::Independent => return Ok(None),
        Policy::Unicontext => teacher.context_for(past, &[])?,
        Policy::Lookahead(k) => teacher.context_for(past, &true_future[..k.min(true_future.len())])?,
        Policy::LookaheadFull => teacher.context_for(past, true_future)?,
        Policy::TeacherLm => {
            let lm = models.lm.expect("checked");
            let mut rng = seed::item_rng(models.sampler.seed, "pipeline.lookahead", t as u64);
            let future = sample_lookahead_with(lm, observed, models.sampler, &mut rng)?;
            teacher.context_for(past, &future)?
        }
        Policy::Student => models.student.expect("checked").predict(observed)?,
    };
    Ok(Some(e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTiming {
    pub t: usize,
    pub context_ms: f64,
    pub decode_ms: f64,
    pub cumulative_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub policy: Policy,
    pub delta: usize,
    pub segments: Vec<FrameSegment>,
    pub frames: Tensor,
    pub timings: Vec<StepTiming>,
}

impl SynthesisResult {
    pub fn runaway_steps(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.runaway)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("t,context_ms,decode_ms,cumulative_ms\n");
        for r in &self.timings {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.t, r.context_ms, r.decode_ms, r.cumulative_ms));
        }
        out
    }
}

/// Runs the policy segment by segment. Step `t` only reads `w_1..w_Nt`
/// unless the policy is a lookahead one.
pub fn incremental_synthesize(s: &Sentence, cfg: &PipelineConfig, models: &Models<'_>) -> Result<SynthesisResult> {
    cfg.validate()?;
    models.check(cfg.policy)?;
    let words = s.words();
    let segments = segment_sentence(s, cfg.segment_words)?;
    let zero = vec![0.0; models.teacher.context_dim()];
    let mut out = Vec::with_capacity(segments.len());
    let mut timings = Vec::with_capacity(segments.len());
    let mut cumulative = 0.0;
    for (i, seg) in segments.iter().enumerate() {
        let t = i + 1;
        let observed = &words[..seg.end()];
        let future: &[WordId] = if cfg.policy.sees_future() { &words[seg.end()..] } else { &[] };
        let t0 = Instant::now();
        let e = resolve_context(cfg.policy, observed, seg.start, future, models, t)?;
        let t1 = Instant::now();
        let current = models.teacher.encode(&seg.words)?;
        let frames = models
            .teacher
            .decode_segment(&current, e.as_deref().unwrap_or(&zero), cfg.max_frames)?;
        let t2 = Instant::now();
        let context_ms = (t1 - t0).as_secs_f64() * 1e3;
        let decode_ms = (t2 - t1).as_secs_f64() * 1e3;
        cumulative += context_ms + decode_ms;
        timings.push(StepTiming {
            t,
            context_ms,
            decode_ms,
            cumulative_ms: cumulative,
        });
        if frames.runaway {
            log::warn!("segment {t} hit the {}-frame cap", cfg.max_frames);
        }
        out.push(frames);
    }
    let parts: Vec<&Tensor> = out.iter().map(|s| &s.frames).collect();
    let frames = concat_with_padding(&parts, cfg.delta)?;
    Ok(SynthesisResult {
        policy: cfg.policy,
        delta: cfg.delta,
        segments: out,
        frames,
        timings,
    })
}

/// Appends `delta` copies of each segment's last frame, then concatenates.
pub fn concat_with_padding(segments: &[&Tensor], delta: usize) -> Result<Tensor> {
    let first = segments.first().ok_or(Error::EmptyInput("concat_with_padding"))?;
    let d = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for seg in segments {
        if seg.cols() != d {
            return Err(Error::dim("concat_with_padding", "segment", d, seg.cols()));
        }
        if seg.rows() == 0 {
            return Err(Error::EmptyInput("concat_with_padding segment"));
        }
        data.extend_from_slice(seg.data());
        let last = seg.row(seg.rows() - 1);
        for _ in 0..delta {
            data.extend_from_slice(last);
        }
        rows += seg.rows() + delta;
    }
    Tensor::from_vec(&[rows, d], data)
}

const FRAMES_MAGIC: &[u8; 8] = b"ITTSFRMS";

/// Frame matrix file: magic, `u64` rows, `u64` cols, `u32` delta, policy
/// name (`u32` length + bytes), then row-major little-endian `f64`.
pub fn write_frames(path: &Path, frames: &Tensor, delta: usize, policy: Policy) -> Result<()> {
    let name = policy.to_string();
    let mut buf = Vec::with_capacity(40 + name.len() + frames.len() * 8);
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&(frames.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u64).to_le_bytes());
    buf.extend_from_slice(&(delta as u32).to_le_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<(Tensor, usize, Policy)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        kind: "frames",
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != FRAMES_MAGIC {
        return Err(bad("bad magic"));
    }
    let rows = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let delta = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let name = std::str::from_utf8(take(n)?).map_err(|_| bad("policy name is not UTF-8"))?;
    let policy: Policy = name.parse()?;
    let count = rows.checked_mul(cols).ok_or_else(|| bad("size overflow"))?;
    let body = take(count * 8)?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((Tensor::from_vec(&[rows, cols], data)?, delta, policy))
}
