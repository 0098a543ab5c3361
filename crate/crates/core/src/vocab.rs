use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenSeq;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Word list with the start and end markers at ids 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Markers first, then `words` in first-seen order without duplicates.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        for w in [BOS, EOS] {
            vocab.push(w);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_owned(), self.words.len());
            self.words.push(word.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Token ids of `seq` followed by the end marker.
    pub fn encode_caption(&self, seq: &TokenSeq) -> Result<Vec<usize>> {
        let mut ids = seq
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::UnknownId(format!("word `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Words of `ids` up to the first end marker; markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> TokenSeq {
        TokenSeq::from_tokens(
            ids.iter()
                .take_while(|&&i| i != EOS_ID)
                .filter(|&&i| i != BOS_ID)
                .filter_map(|&i| self.word(i)),
        )
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != BOS || words[1] != EOS {
            return Err(Error::InvalidParameter(
                "vocabulary must start with <bos>, <eos>".into(),
            ));
        }
        Ok(Vocab::new(&words[2..]))
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}
