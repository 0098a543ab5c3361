//! Similar-image groups built by exhaustive cosine retrieval over
//! precomputed embeddings.
//!
//! Targets are visited in a seeded random order. Each group (target plus its
//! K nearest images still in the pool) is removed from the pool, so during
//! the main phase every image lands in exactly one group. Once fewer than
//! K+1 images remain, each leftover image becomes a target whose similars are
//! retrieved from the whole image set; those groups are tagged `leftover`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CaptionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Image,
    Caption,
}

/// Separator between owner image id and caption index in caption-store ids,
/// e.g. `img42#3`.
pub const CAPTION_ID_SEPARATOR: char = '#';

/// Fixed-width vectors keyed by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    kind: EmbeddingKind,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, kind: EmbeddingKind) -> Self {
        EmbeddingStore {
            dim,
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector `{id}` has length {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("component {i} of `{id}`")));
        }
        if self.kind == EmbeddingKind::Caption && !id.contains(CAPTION_ID_SEPARATOR) {
            return Err(Error::InvalidParameter(format!(
                "caption embedding id `{id}` lacks an owner prefix (`<image>{CAPTION_ID_SEPARATOR}<n>`)"
            )));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn set_kind(&mut self, kind: EmbeddingKind) {
        self.kind = kind;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn vector(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Owner image of a caption-store id.
    pub fn owner(id: &str) -> &str {
        id.rsplit_once(CAPTION_ID_SEPARATOR)
            .map(|(owner, _)| owner)
            .unwrap_or(id)
    }
}

/// A target image followed by its K similar images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGroup {
    pub target: String,
    pub similars: Vec<String>,
    #[serde(default)]
    pub leftover: bool,
}

impl ImageGroup {
    pub fn new(target: impl Into<String>, similars: Vec<String>) -> Result<Self> {
        let group = ImageGroup {
            target: target.into(),
            similars,
            leftover: false,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        seen.insert(self.target.as_str());
        for s in &self.similars {
            if !seen.insert(s.as_str()) {
                return Err(Error::DuplicateId(s.clone()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.similars.len()
    }

    /// Target first, then similars.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.target.as_str()).chain(self.similars.iter().map(String::as_str))
    }

    /// The same images with `members()[index]` as target and the rest, in
    /// order, as similars.
    pub fn with_target(&self, index: usize) -> ImageGroup {
        let members: Vec<&str> = self.members().collect();
        ImageGroup {
            target: members[index].to_owned(),
            similars: members
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != index)
                .map(|(_, m)| (*m).to_owned())
                .collect(),
            leftover: self.leftover,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    #[default]
    ImageImage,
    /// Candidates ranked by the best cosine between the target image vector
    /// and any of their caption vectors.
    CaptionRetrieval,
}

fn cosine32(u: &[f32], v: &[f32]) -> Option<f64> {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        None
    } else {
        Some(dot / (nu.sqrt() * nv.sqrt()))
    }
}

fn rank_desc(mut scored: Vec<(f64, &str)>, k: usize) -> Vec<String> {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    scored.into_iter().take(k).map(|(_, id)| id.to_owned()).collect()
}

/// The `k` ids of `pool` (excluding the query) with highest cosine to the
/// query vector, descending, ties by ascending id.
pub fn nearest(
    store: &EmbeddingStore,
    query_id: &str,
    k: usize,
    pool: &BTreeSet<String>,
) -> Result<Vec<String>> {
    let query = store.vector(query_id)?;
    let mut scored = Vec::with_capacity(pool.len());
    for id in pool.iter().filter(|id| id.as_str() != query_id) {
        let v = store.vector(id)?;
        let sim = cosine32(query, v).ok_or_else(|| {
            let zero = if cosine32(query, query).is_none() { query_id } else { id.as_str() };
            Error::ZeroVector(zero.to_owned())
        })?;
        scored.push((sim, id.as_str()));
    }
    if scored.len() < k {
        return Err(Error::InsufficientPool {
            requested: k,
            available: scored.len(),
        });
    }
    Ok(rank_desc(scored, k))
}

/// Caption-retrieval variant of [`nearest`]: each pool image scores the best
/// cosine between the query image vector and any of its caption vectors.
/// Pool images without caption vectors are skipped.
pub fn nearest_by_captions(
    images: &EmbeddingStore,
    captions: &EmbeddingStore,
    query_id: &str,
    k: usize,
    pool: &BTreeSet<String>,
) -> Result<Vec<String>> {
    let query = images.vector(query_id)?;
    if captions.dim() != images.dim() {
        return Err(Error::Shape(format!(
            "caption dim {} vs image dim {}",
            captions.dim(),
            images.dim()
        )));
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (cid, v) in captions.iter() {
        let owner = EmbeddingStore::owner(cid);
        if owner == query_id || !pool.contains(owner) {
            continue;
        }
        let sim = cosine32(query, v).ok_or_else(|| Error::ZeroVector(cid.to_owned()))?;
        let slot = best.entry(owner).or_insert(f64::NEG_INFINITY);
        if sim > *slot {
            *slot = sim;
        }
    }
    if best.len() < k {
        return Err(Error::InsufficientPool {
            requested: k,
            available: best.len(),
        });
    }
    Ok(rank_desc(best.into_iter().map(|(id, s)| (s, id)).collect(), k))
}

/// Inputs to [`build_groups`] besides the dataset.
pub struct GroupSource<'a> {
    pub images: &'a EmbeddingStore,
    /// Required for [`RetrievalMode::CaptionRetrieval`].
    pub captions: Option<&'a EmbeddingStore>,
}

/// Greedy partition of the dataset into groups of `k + 1` images.
pub fn build_groups(
    source: &GroupSource<'_>,
    dataset: &CaptionDataset,
    k: usize,
    seed: u64,
    mode: RetrievalMode,
) -> Result<Vec<ImageGroup>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if k >= dataset.len() {
        return Err(Error::GroupTooLarge {
            k,
            images: dataset.len(),
        });
    }
    let captions = match mode {
        RetrievalMode::ImageImage => None,
        RetrievalMode::CaptionRetrieval => Some(source.captions.ok_or_else(|| {
            Error::InvalidParameter("caption-retrieval mode needs caption embeddings".into())
        })?),
    };
    let all: BTreeSet<String> = dataset.sorted_ids().into_iter().map(str::to_owned).collect();
    for id in &all {
        source.images.vector(id)?;
    }
    let retrieve = |query: &str, pool: &BTreeSet<String>| match captions {
        None => nearest(source.images, query, k, pool),
        Some(caps) => nearest_by_captions(source.images, caps, query, k, pool),
    };

    let mut order: Vec<String> = all.iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut pool = all.clone();
    let mut groups = Vec::new();
    let mut cursor = order.iter();
    while pool.len() > k {
        let target = cursor
            .by_ref()
            .find(|id| pool.contains(*id))
            .expect("pool members appear in the visiting order")
            .clone();
        let similars = retrieve(&target, &pool)?;
        pool.remove(&target);
        for s in &similars {
            pool.remove(s);
        }
        groups.push(ImageGroup {
            target,
            similars,
            leftover: false,
        });
    }
    for target in order.iter().filter(|id| pool.contains(*id)) {
        let similars = retrieve(target, &all)?;
        groups.push(ImageGroup {
            target: target.clone(),
            similars,
            leftover: true,
        });
    }
    Ok(groups)
}
