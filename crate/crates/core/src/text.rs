//! Tokenization, n-gram counting and word sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest n-gram order used by the consensus metrics.
pub const MAX_ORDER: usize = 4;

/// A tokenized caption: lowercase words from `[a-z0-9']`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Builds a sequence from tokens that already satisfy the normalization
    /// rule. Anything else is re-tokenized so the invariant holds.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = tokens
            .into_iter()
            .map(|t| t.as_ref().to_owned())
            .collect::<Vec<_>>()
            .join(" ");
        tokenize(&joined)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.iter().any(|t| t == word)
    }

    pub fn word_set(&self) -> WordSet {
        self.0.iter().cloned().collect()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Lowercases, maps every character outside `[a-z0-9']` to a space and
/// splits on whitespace.
pub fn tokenize(raw: &str) -> TokenSeq {
    let normalized: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    TokenSeq(normalized.split_whitespace().map(str::to_owned).collect())
}

pub type NGram = Vec<String>;

/// Counts of contiguous n-grams of a single order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramCounts {
    pub n: usize,
    pub counts: BTreeMap<NGram, usize>,
}

impl NGramCounts {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }
}

pub fn check_order(n: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidOrder(n))
    }
}

/// Sliding-window n-gram counts of order `n` (1..=4).
pub fn ngrams(seq: &TokenSeq, n: usize) -> Result<NGramCounts> {
    check_order(n)?;
    let mut counts = BTreeMap::new();
    for window in seq.0.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    Ok(NGramCounts { n, counts })
}

/// An unordered set of unique words.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordSet(BTreeSet<String>);

impl WordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>) -> bool {
        self.0.insert(word.into())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &WordSet) -> WordSet {
        WordSet(self.0.union(&other.0).cloned().collect())
    }

    pub fn difference(&self, other: &WordSet) -> WordSet {
        WordSet(self.0.difference(&other.0).cloned().collect())
    }

    pub fn intersection(&self, other: &WordSet) -> WordSet {
        WordSet(self.0.intersection(&other.0).cloned().collect())
    }

    pub fn intersection_len(&self, other: &WordSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter(|w| large.0.contains(*w)).count()
    }

    pub fn is_subset(&self, other: &WordSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl<S: Into<String>> FromIterator<S> for WordSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        WordSet(iter.into_iter().map(Into::into).collect())
    }
}

/// Union of the unique tokens of every caption.
pub fn word_set(captions: &[TokenSeq]) -> WordSet {
    captions
        .iter()
        .flat_map(|c| c.0.iter().cloned())
        .collect()
}
