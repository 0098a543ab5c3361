//! Distinctive word sets, their relatedness weights, and the
//! distinctive/common split of ground-truth captions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::CaptionDataset;
use crate::error::{Error, Result};
use crate::groups::{EmbeddingStore, ImageGroup};
use crate::metrics::{cider_btw, CiderScorer};
use crate::text::{word_set, TokenSeq, WordSet};

/// Template sentence embedded offline for each distinctive word.
pub fn template_sentence(word: &str) -> String {
    format!("this picture includes {word}")
}

/// Words of the target's captions that appear in none of the similar
/// images' captions.
pub fn distinct_words(target_gts: &[TokenSeq], similar_gts: &[TokenSeq]) -> WordSet {
    word_set(target_gts).difference(&word_set(similar_gts))
}

/// Distinctive words of the group target against every similar image.
pub fn group_distinct_words(group: &ImageGroup, dataset: &CaptionDataset) -> Result<WordSet> {
    let target = dataset.gts(&group.target)?;
    let mut similar = Vec::new();
    for id in &group.similars {
        similar.extend_from_slice(dataset.gts(id)?);
    }
    Ok(distinct_words(target, &similar))
}

/// Relatedness weights `λ = max(λ̂, 0) / max(λ̂)` with
/// `λ̂ = <θ(template(ω)), φ(image)>`. All-nonpositive `λ̂` falls back to 1.
pub fn relatedness_weights(
    omega: &WordSet,
    sentence_embeddings: &EmbeddingStore,
    image_vec: &[f32],
) -> Result<BTreeMap<String, f64>> {
    if image_vec.len() != sentence_embeddings.dim() {
        return Err(Error::Shape(format!(
            "image vector has length {}, sentence embeddings have dim {}",
            image_vec.len(),
            sentence_embeddings.dim()
        )));
    }
    let mut raw = BTreeMap::new();
    for word in omega.iter() {
        let v = sentence_embeddings
            .get(&template_sentence(word))
            .ok_or_else(|| Error::MissingTemplate(word.to_owned()))?;
        let dot: f64 = v
            .iter()
            .zip(image_vec)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        raw.insert(word.to_owned(), dot.max(0.0));
    }
    let max = raw.values().copied().fold(0.0f64, f64::max);
    Ok(raw
        .into_iter()
        .map(|(w, v)| (w, if max > 0.0 { v / max } else { 1.0 }))
        .collect())
}

/// Distinctive words of one target with their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctProfile {
    pub target: String,
    pub omega: WordSet,
    pub weights: BTreeMap<String, f64>,
}

impl DistinctProfile {
    /// Profile with every weight set to 1.
    pub fn uniform(target: impl Into<String>, omega: WordSet) -> Self {
        let weights = omega.iter().map(|w| (w.to_owned(), 1.0)).collect();
        DistinctProfile {
            target: target.into(),
            omega,
            weights,
        }
    }

    pub fn with_weights(
        target: impl Into<String>,
        omega: WordSet,
        weights: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if weights.len() != omega.len() || omega.iter().any(|w| !weights.contains_key(w)) {
            return Err(Error::InvalidParameter(
                "weights must be keyed exactly by the distinctive words".into(),
            ));
        }
        Ok(DistinctProfile {
            target: target.into(),
            omega,
            weights,
        })
    }

    pub fn weight(&self, word: &str) -> f64 {
        self.weights.get(word).copied().unwrap_or(0.0)
    }

    /// `(word, λ)` pairs in word order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(w, &l)| (w.as_str(), l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "rule", content = "tau")]
pub enum SplitRule {
    /// Strictly below the median of the target's caption scores.
    #[default]
    Median,
    /// Strictly below a fixed threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLabel {
    Distinctive,
    Common,
}

/// One label per ground-truth caption of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionIndicator {
    pub labels: Vec<CaptionLabel>,
    pub scores: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Labels each of the target's captions by its CIDErBtw against the group's
/// similar images; lower scores are distinctive.
pub fn indicate_captions(
    target_gts: &[TokenSeq],
    group: &ImageGroup,
    dataset: &CaptionDataset,
    scorer: &CiderScorer,
    rule: SplitRule,
) -> Result<CaptionIndicator> {
    if target_gts.is_empty() {
        return Err(Error::Empty("ground-truth set"));
    }
    let scores = target_gts
        .iter()
        .map(|c| cider_btw(scorer, c, group, dataset))
        .collect::<Result<Vec<_>>>()?;
    let cut = match rule {
        SplitRule::Median => median(&scores),
        SplitRule::Threshold(tau) => tau,
    };
    let labels = scores
        .iter()
        .map(|&s| {
            if s < cut {
                CaptionLabel::Distinctive
            } else {
                CaptionLabel::Common
            }
        })
        .collect();
    Ok(CaptionIndicator { labels, scores })
}
