//! Sentence corpora and the frame-target oracle.
//!
//! The synthetic corpus is drawn from a seeded first-order Markov chain. Each
//! word also carries a probability of ending the sentence after it, so the
//! observed words say something about how many words are still to come. Frame
//! targets are a deterministic function of the sentence whose scale declines
//! with position relative to the sentence length, so every frame depends on
//! how many words are still to come.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;

pub type WordId = usize;

pub const EOS: WordId = 0;
pub const UNK: WordId = 1;
const RESERVED: usize = 2;

/// Ordered word list with its inverse map. Ids 0 and 1 are EOS and UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular words (reserved tokens are prepended).
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec!["<eos>".to_string(), "<unk>".to_string()];
        all.extend(words.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words: all, index })
    }

    /// `w00, w01, ...` for the synthetic corpus.
    pub fn synthetic(size: usize) -> Self {
        let width = size.saturating_sub(1).to_string().len().max(2);
        Self::from_words((0..size).map(|i| format!("w{i:0width$}"))).expect("unique words")
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == RESERVED
    }

    /// Number of regular (non-reserved) words.
    pub fn regular_len(&self) -> usize {
        self.words.len() - RESERVED
    }

    pub fn word(&self, id: WordId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> WordId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn regular_words(&self) -> &[String] {
        &self.words[RESERVED..]
    }

    pub fn check(&self, id: WordId) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary { id, size: self.len() })
        }
    }

    /// Lowercases, splits on whitespace and maps out-of-vocabulary words to UNK.
    pub fn encode_line(&self, line: &str) -> Vec<WordId> {
        line.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[WordId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for w in self.regular_words() {
            writeln!(s, "{w}").expect("string write");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}

/// Word-id sequence terminated by exactly one EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<WordId>,
}

impl Sentence {
    pub fn new(words: Vec<WordId>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::EmptyInput("Sentence::new"));
        }
        if words.contains(&EOS) {
            return Err(Error::Config("EOS inside sentence body".into()));
        }
        let mut tokens = words;
        tokens.push(EOS);
        Ok(Sentence { tokens })
    }

    /// All tokens including the final EOS.
    pub fn tokens(&self) -> &[WordId] {
        &self.tokens
    }

    /// Words excluding EOS.
    pub fn words(&self) -> &[WordId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Word count `M` excluding EOS.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First-order chain over the regular words of a synthetic vocabulary.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    /// Row-stochastic `[n x n]` over regular-word indices (id - 2).
    pub transitions: Vec<Vec<f64>>,
    /// Probability that a sentence ends right after each word, once the
    /// minimum length is reached.
    pub end_prob: Vec<f64>,
}

/// Successors given most of each row's mass.
const BRANCHING: usize = 5;
/// Mass spread uniformly over every word so the chain is irreducible.
const SMOOTHING: f64 = 0.05;
/// Share of words that usually close a sentence.
const ENDER_FRACTION: f64 = 0.25;
const ENDER_PROB: f64 = 0.5;
const BASE_END_PROB: f64 = 0.05;

impl MarkovChain {
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let transitions = (0..n)
            .map(|_| {
                let mut row = vec![SMOOTHING / n as f64; n];
                let succ = rand::seq::index::sample(rng, n, BRANCHING.min(n));
                let weights: Vec<f64> = succ.iter().map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = weights.iter().sum();
                for (s, w) in succ.iter().zip(&weights) {
                    row[s] += (1.0 - SMOOTHING) * w / total;
                }
                row
            })
            .collect();
        let enders = ((n as f64 * ENDER_FRACTION).round() as usize).max(1);
        let mut end_prob = vec![BASE_END_PROB; n];
        for i in rand::seq::index::sample(rng, n, enders) {
            end_prob[i] = ENDER_PROB;
        }
        MarkovChain {
            transitions,
            end_prob,
        }
    }

    pub fn size(&self) -> usize {
        self.transitions.len()
    }

    /// `p(next | prev)` with both given as word ids.
    pub fn conditional(&self, prev: WordId, next: WordId) -> f64 {
        self.transitions[prev - RESERVED][next - RESERVED]
    }

    pub fn end_probability(&self, word: WordId) -> f64 {
        self.end_prob[word - RESERVED]
    }

    fn step<R: Rng>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[state];
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub chain: MarkovChain,
    pub sentences: Vec<Sentence>,
}

const BURN_IN: usize = 32;

/// Draws `count` sentences by running one seeded chain continuously and
/// cutting it into sentences. A sentence may end after word `w` with
/// probability `end_prob[w]` once it has `length_range.0` words and must end at
/// `length_range.1`. Cuts never alter the word stream, so word frequencies
/// follow the chain's stationary distribution.
pub fn generate_corpus(
    seed: u64,
    vocab_size: usize,
    count: usize,
    length_range: (usize, usize),
) -> Result<SyntheticCorpus> {
    let (lo, hi) = length_range;
    if vocab_size < 8 {
        return Err(Error::Config(format!("vocab_size {vocab_size} < 8")));
    }
    if lo < 4 || hi > 30 || lo > hi {
        return Err(Error::Config(format!(
            "length range [{lo}, {hi}] must satisfy 4 <= min <= max <= 30"
        )));
    }
    let vocab = Vocabulary::synthetic(vocab_size);
    let mut rng = seed::rng_for(seed, "corpus.chain");
    let chain = MarkovChain::random(vocab_size, &mut rng);
    let mut rng = seed::rng_for(seed, "corpus.sample");
    let mut state = rng.random_range(0..vocab_size);
    for _ in 0..BURN_IN {
        state = chain.step(state, &mut rng);
    }
    let mut sentences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut words = Vec::with_capacity(hi);
        loop {
            state = chain.step(state, &mut rng);
            words.push(state + RESERVED);
            let m = words.len();
            let cut: f64 = rng.random();
            if m >= hi || (m >= lo && cut < chain.end_prob[state]) {
                break;
            }
        }
        sentences.push(Sentence::new(words)?);
    }
    Ok(SyntheticCorpus {
        vocab,
        chain,
        sentences,
    })
}

/// One sentence per line, space-separated words.
pub fn write_corpus(path: &Path, vocab: &Vocabulary, sentences: &[Sentence]) -> Result<()> {
    let mut s = String::new();
    for sent in sentences {
        writeln!(s, "{}", vocab.decode(sent.words())).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a plain-text corpus; blank lines are skipped.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, vocab)
}

pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<Sentence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let ids: Vec<WordId> = vocab
                .encode_line(l)
                .into_iter()
                .filter(|&i| i != EOS)
                .collect();
            Sentence::new(ids)
        })
        .collect()
}

/// Oracle frames for a sentence plus per-word end markers.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTarget {
    /// `[M*K_f x D]`
    pub frames: Tensor,
    /// 1.0 on the last frame of every word.
    pub stop: Vec<f64>,
    pub frames_per_word: usize,
}

impl FrameTarget {
    /// Frames for words `start..start+n` with a single stop flag on the last
    /// frame of the span.
    pub fn segment(&self, start: usize, n: usize) -> (Tensor, Vec<f64>) {
        let k = self.frames_per_word;
        let d = self.frames.cols();
        let rows = n * k;
        let data = self.frames.data()[start * k * d..(start + n) * k * d].to_vec();
        let mut stop = vec![0.0; rows];
        if rows > 0 {
            stop[rows - 1] = 1.0;
        }
        (Tensor::from_vec(&[rows, d], data).expect("shape"), stop)
    }
}

/// Declination factor `1 - 0.5 (n-1) / max(M-1, 1)` for 1-based position `n`.
pub fn declination(n: usize, m: usize) -> f64 {
    1.0 - 0.5 * (n as f64 - 1.0) / ((m as f64 - 1.0).max(1.0))
}

/// Deterministic stand-in for recorded speech.
///
/// `frame(n, j) = emb(w_n) * declination(n, M) + offset(j)` where `emb` is a
/// seeded table in `[-1, 1]^D` and `offset(j)` is a fixed per-frame pattern
/// bounded by 0.1.
#[derive(Clone, Debug)]
pub struct FrameOracle {
    table: Vec<Vec<f64>>,
    pub frames_per_word: usize,
    pub dim: usize,
}

impl FrameOracle {
    pub fn new(vocab_len: usize, frames_per_word: usize, dim: usize, seed: u64) -> Result<Self> {
        if frames_per_word < 1 || dim < 2 {
            return Err(Error::Config(format!(
                "oracle needs frames_per_word >= 1 and dim >= 2 (got {frames_per_word}, {dim})"
            )));
        }
        let mut rng = seed::rng_for(seed, "oracle.table");
        let table = (0..vocab_len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Ok(FrameOracle {
            table,
            frames_per_word,
            dim,
        })
    }

    pub fn word_embedding(&self, id: WordId) -> Result<&[f64]> {
        self.table
            .get(id)
            .map(Vec::as_slice)
            .ok_or(Error::Vocabulary {
                id,
                size: self.table.len(),
            })
    }

    /// Offset pattern for frame `j` within a word.
    pub fn offset(&self, j: usize) -> Vec<f64> {
        offset_vector(j, self.frames_per_word, self.dim)
    }

    pub fn frames(&self, s: &Sentence) -> Result<FrameTarget> {
        let m = s.len();
        let (k, d) = (self.frames_per_word, self.dim);
        let mut data = Vec::with_capacity(m * k * d);
        let mut stop = Vec::with_capacity(m * k);
        let offsets: Vec<Vec<f64>> = (0..k).map(|j| self.offset(j)).collect();
        for (idx, &w) in s.words().iter().enumerate() {
            let emb = self.word_embedding(w)?;
            let decl = declination(idx + 1, m);
            for (j, off) in offsets.iter().enumerate() {
                data.extend(emb.iter().zip(off).map(|(e, o)| e * decl + o));
                stop.push(if j == k - 1 { 1.0 } else { 0.0 });
            }
        }
        Ok(FrameTarget {
            frames: Tensor::from_vec(&[m * k, d], data)?,
            stop,
            frames_per_word: k,
        })
    }
}

fn offset_vector(j: usize, frames_per_word: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            0.1 * (std::f64::consts::PI * (j as f64 + 0.5) * (d as f64 + 1.0)
                / frames_per_word as f64)
                .cos()
        })
        .collect()
}

/// Free-function form of [`FrameOracle::frames`].
pub fn oracle_frames(
    s: &Sentence,
    vocab_len: usize,
    frames_per_word: usize,
    dim: usize,
    seed: u64,
) -> Result<FrameTarget> {
    FrameOracle::new(vocab_len, frames_per_word, dim, seed)?.frames(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_inverse_and_reserved() {
        let v = Vocabulary::synthetic(10);
        assert_eq!(v.len(), 12);
        assert_eq!(v.word(EOS), Some("<eos>"));
        assert_eq!(v.word(UNK), Some("<unk>"));
        for id in 0..v.len() {
            assert_eq!(v.id(v.word(id).unwrap()), id);
        }
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn plain_text_is_lowercased_and_oov_mapped() {
        let v = Vocabulary::from_words(["the", "cat"]).unwrap();
        let s = parse_corpus("The CAT sat\n\n", &v).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].words(), &[2, 3, UNK]);
        assert_eq!(s[0].tokens().last(), Some(&EOS));
    }

    #[test]
    fn sentence_invariants() {
        assert!(Sentence::new(vec![]).is_err());
        assert!(Sentence::new(vec![3, EOS, 4]).is_err());
        let s = Sentence::new(vec![3, 4]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.tokens().iter().filter(|&&t| t == EOS).count(), 1);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(3, 16, 20, (4, 9)).unwrap();
        let b = generate_corpus(3, 16, 20, (4, 9)).unwrap();
        assert_eq!(a.sentences, b.sentences);
        let c = generate_corpus(4, 16, 20, (4, 9)).unwrap();
        assert_ne!(a.sentences, c.sentences);
    }

    #[test]
    fn fixed_length_range() {
        let c = generate_corpus(1, 16, 50, (5, 5)).unwrap();
        assert!(c.sentences.iter().all(|s| s.len() == 5));
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(generate_corpus(1, 7, 5, (4, 6)).is_err());
        assert!(generate_corpus(1, 16, 5, (3, 6)).is_err());
        assert!(generate_corpus(1, 16, 5, (8, 6)).is_err());
        assert!(generate_corpus(1, 16, 5, (4, 31)).is_err());
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let c = generate_corpus(2, 32, 1, (4, 4)).unwrap();
        for row in &c.chain.transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn single_word_sentence_has_unit_declination() {
        let o = FrameOracle::new(10, 3, 4, 7).unwrap();
        let s = Sentence::new(vec![5]).unwrap();
        let t = o.frames(&s).unwrap();
        let emb = o.word_embedding(5).unwrap();
        for j in 0..3 {
            let off = o.offset(j);
            for d in 0..4 {
                assert_eq!(t.frames.row(j)[d], emb[d] * 1.0 + off[d]);
            }
        }
    }

    #[test]
    fn last_word_declination_is_half() {
        for m in 2..12 {
            assert_eq!(declination(m, m), 0.5);
        }
        assert_eq!(declination(1, 1), 1.0);
    }

    #[test]
    fn frames_match_independent_formula() {
        let (k, d, seed) = (4, 6, 99);
        let o = FrameOracle::new(20, k, d, seed).unwrap();
        let s = Sentence::new(vec![4, 9, 2, 17, 4]).unwrap();
        let t = o.frames(&s).unwrap();
        assert_eq!(t.frames.shape(), &[5 * k, d]);
        let m = 5.0;
        for (n, &w) in s.words().iter().enumerate() {
            let decl = 1.0 - 0.5 * (n as f64) / (m - 1.0);
            for j in 0..k {
                for c in 0..d {
                    let pos = 0.1
                        * (std::f64::consts::PI * (j as f64 + 0.5) * (c as f64 + 1.0) / k as f64)
                            .cos();
                    let want = o.word_embedding(w).unwrap()[c] * decl + pos;
                    assert!((t.frames.row(n * k + j)[c] - want).abs() < 1e-15);
                }
                assert_eq!(t.stop[n * k + j], if j == k - 1 { 1.0 } else { 0.0 });
            }
        }
        assert!(t.frames.data().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn unknown_word_is_a_vocabulary_error() {
        let o = FrameOracle::new(10, 2, 2, 1).unwrap();
        let s = Sentence::new(vec![3, 12]).unwrap();
        assert!(matches!(o.frames(&s), Err(Error::Vocabulary { id: 12, .. })));
    }

    #[test]
    fn prefix_frames_depend_on_sentence_length() {
        let o = FrameOracle::new(20, 4, 8, 5).unwrap();
        let a = Sentence::new(vec![3, 4, 5, 6, 7]).unwrap();
        let b = Sentence::new(vec![3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
        let fa = o.frames(&a).unwrap();
        let fb = o.frames(&b).unwrap();
        // The first word has declination 1 in both; later prefix words differ.
        let (pa, _) = fa.segment(1, 3);
        let (pb, _) = fb.segment(1, 3);
        assert_ne!(pa, pb);
    }

    #[test]
    fn segment_has_single_stop_flag() {
        let o = FrameOracle::new(10, 4, 2, 5).unwrap();
        let s = Sentence::new(vec![2, 3, 4, 5]).unwrap();
        let t = o.frames(&s).unwrap();
        let (f, stop) = t.segment(1, 2);
        assert_eq!(f.rows(), 8);
        assert_eq!(stop.iter().sum::<f64>(), 1.0);
        assert_eq!(stop[7], 1.0);
        assert_eq!(f.row(0), t.frames.row(4));
    }
}
