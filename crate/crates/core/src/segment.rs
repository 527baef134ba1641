//! Splitting sentences into synthesis segments and training windows.

use crate::corpus::{Sentence, WordId};
use crate::error::{Error, Result};

/// A run of consecutive words `[start, start + words.len())`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub words: Vec<WordId>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.words.len()
    }
}

/// Consecutive `n`-word chunks; the last one may be shorter.
pub fn segment_sentence(s: &Sentence, n: usize) -> Result<Vec<Segment>> {
    if n == 0 {
        return Err(Error::Config("segment length must be >= 1".into()));
    }
    let words = s.words();
    if words.is_empty() {
        return Err(Error::EmptyInput("segment_sentence"));
    }
    Ok(words
        .chunks(n)
        .enumerate()
        .map(|(i, c)| Segment {
            start: i * n,
            words: c.to_vec(),
        })
        .collect())
}

/// Word span `[start, end)` of the current part of a training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn observed<'a>(&self, s: &'a Sentence) -> &'a [WordId] {
        &s.words()[..self.start]
    }

    pub fn current<'a>(&self, s: &'a Sentence) -> &'a [WordId] {
        &s.words()[self.start..self.end]
    }

    pub fn future<'a>(&self, s: &'a Sentence) -> &'a [WordId] {
        &s.words()[self.end..]
    }
}

/// Sliding windows of `window` words moved by `hop`. Sentences shorter than
/// the window yield none.
pub fn make_training_windows(s: &Sentence, window: usize, hop: usize) -> Vec<Window> {
    let m = s.words().len();
    if window == 0 || hop == 0 || m < window {
        return Vec::new();
    }
    (0..=m - window)
        .step_by(hop)
        .map(|start| Window {
            start,
            end: start + window,
        })
        .collect()
}
