//! Ground-truth captions keyed by image id.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCaptions {
    pub id: String,
    pub captions: Vec<String>,
    pub tokens: Vec<TokenSeq>,
}

/// Image ids mapped to their ground-truth captions, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptionDataset {
    images: Vec<ImageCaptions>,
    index: BTreeMap<String, usize>,
}

impl CaptionDataset {
    /// Validates ids (unique) and caption lists (nonempty) and caches
    /// tokenized captions.
    pub fn new<I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let mut dataset = CaptionDataset::default();
        for (id, captions) in images {
            dataset.push(id, captions)?;
        }
        Ok(dataset)
    }

    pub fn push(&mut self, id: String, captions: Vec<String>) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        if captions.is_empty() {
            return Err(Error::NoCaptions(id));
        }
        let tokens = captions.iter().map(|c| tokenize(c)).collect();
        self.index.insert(id.clone(), self.images.len());
        self.images.push(ImageCaptions {
            id,
            captions,
            tokens,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageCaptions] {
        &self.images
    }

    pub fn get(&self, id: &str) -> Option<&ImageCaptions> {
        self.index.get(id).map(|&i| &self.images[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Tokenized captions of `id`.
    pub fn gts(&self, id: &str) -> Result<&[TokenSeq]> {
        self.get(id)
            .map(|img| img.tokens.as_slice())
            .ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    /// Ids in ascending order.
    pub fn sorted_ids(&self) -> Vec<&str> {
        self.index.keys().map(String::as_str).collect()
    }
}
