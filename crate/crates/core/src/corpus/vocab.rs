//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"];

/// Words seen fewer times than this in the training corpus map to UNK.
pub const MIN_FREQUENCY: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token id {id} outside vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    counts: Vec<usize>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = VocabError;

    fn try_from(f: VocabFile) -> Result<Self, VocabError> {
        if f.words.len() != f.counts.len() {
            return Err(VocabError::Malformed("words and counts differ in length".into()));
        }
        if f.words.len() < SPECIALS.len() || f.words[..SPECIALS.len()] != SPECIALS {
            return Err(VocabError::Malformed("special tokens missing or reordered".into()));
        }
        let index: HashMap<_, _> = f.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != f.words.len() {
            return Err(VocabError::Malformed("duplicate word".into()));
        }
        Ok(Self {
            words: f.words,
            counts: f.counts,
            index,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.words,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    /// Counts whitespace-separated words over `texts` and keeps those seen at
    /// least `min_frequency` times, ordered by frequency (descending) then
    /// alphabetically, after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_frequency: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(w, c)| *c >= min_frequency && !SPECIALS.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.iter().map(|(w, _)| w.to_string()))
            .collect::<Vec<_>>();
        let counts = std::iter::repeat_n(0, SPECIALS.len()).chain(kept.iter().map(|(_, c)| *c)).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, counts, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Training-corpus count of an in-vocabulary word (0 for specials).
    pub fn count(&self, word: &str) -> Option<usize> {
        self.id(word).map(|i| self.counts[i])
    }

    /// Out-of-vocabulary words become UNK. Never adds BOS or EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, VocabError> {
        let words = ids
            .iter()
            .map(|&id| {
                self.word(id).ok_or(VocabError::UnknownId {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    pub fn fingerprint(&self) -> String {
        crate::config::fingerprint_of("vocab", &self.words)
    }
}
