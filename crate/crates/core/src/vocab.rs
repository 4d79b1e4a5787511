//! Closed word-level vocabulary.
//!
//! The whole synthetic world is built from a known finite set of words, so
//! tokenization is whitespace splitting over lowercase text plus a handful of
//! special markers. Ids are assigned deterministically: specials first, then
//! the sorted, deduplicated union of every word the generators can emit. An
//! out-of-vocabulary word at tokenization time is a bug in the generators and
//! comes back as an error, not a silent UNK.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const Q: u32 = 3;
pub const A: u32 = 4;

/// Printed forms of the special ids, in id order.
pub const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<eos>", "<sep>", "<q>", "<a>"];

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("token id {0} is out of range (vocab size {1})")]
    UnknownId(u32, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from the complete list of ordinary words the generators emit.
    /// Input casing and duplicates are normalized away.
    pub fn build(words: &[&str]) -> Vocab {
        let mut ordinary: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        ordinary.sort();
        ordinary.dedup();
        let mut all: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(ordinary);
        let mut v = Vocab {
            words: all,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    /// Restore the id->word table after deserialization.
    pub fn reindex(mut self) -> Vocab {
        self.rebuild_index();
        self
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str, VocabError> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(VocabError::UnknownId(id, self.words.len()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Lowercase, split on whitespace, map every word. No UNK: unknown words
    /// are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, VocabError> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.id(w))
            .collect()
    }

    /// Inverse of `tokenize` up to whitespace normalization.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, VocabError> {
        let words: Result<Vec<&str>, VocabError> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    /// All non-special ids, for embedding-table sweeps.
    pub fn ordinary_ids(&self) -> std::ops::Range<u32> {
        SPECIAL_NAMES.len() as u32..self.words.len() as u32
    }
}
