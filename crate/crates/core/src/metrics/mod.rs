//! Accuracy (CIDEr, BLEU) and distinctiveness (CIDErBtw, CIDErRank,
//! DisWordRate) metrics.

mod bleu;
mod cider;
mod report;

pub use bleu::bleu;
pub use cider::{CiderConfig, CiderScorer, CiderVariant, IdfTable};
pub use report::{corpus_report, CorpusMeans, ImageRecord, MetricReport};

use crate::dataset::CaptionDataset;
use crate::error::{Error, Result};
use crate::groups::ImageGroup;
use crate::text::{TokenSeq, WordSet};

/// Similarity `s_k` of the candidate to every group member, target first.
pub fn group_similarities(
    scorer: &CiderScorer,
    candidate: &TokenSeq,
    group: &ImageGroup,
    dataset: &CaptionDataset,
) -> Result<Vec<f64>> {
    group
        .members()
        .map(|id| scorer.per_image_similarity(candidate, dataset.gts(id)?))
        .collect()
}

/// Mean similarity of the candidate to the similar images' ground truths.
/// Lower is more distinctive.
pub fn cider_btw(
    scorer: &CiderScorer,
    candidate: &TokenSeq,
    group: &ImageGroup,
    dataset: &CaptionDataset,
) -> Result<f64> {
    if group.similars.is_empty() {
        return Err(Error::Empty("similar image list"));
    }
    let mut total = 0.0;
    for id in &group.similars {
        total += scorer.per_image_similarity(candidate, dataset.gts(id)?)?;
    }
    Ok(total / group.similars.len() as f64)
}

/// `1 + |{k >= 1 : s_k > s_0}|`; ties favor the target.
pub fn rank_of_target(similarities: &[f64]) -> usize {
    let (s0, rest) = similarities
        .split_first()
        .expect("similarities include the target");
    1 + rest.iter().filter(|&&s| s > *s0).count()
}

/// Rank of the target's similarity among all group members (best is 1).
pub fn cider_rank(
    scorer: &CiderScorer,
    candidate: &TokenSeq,
    group: &ImageGroup,
    dataset: &CaptionDataset,
) -> Result<usize> {
    Ok(rank_of_target(&group_similarities(
        scorer, candidate, group, dataset,
    )?))
}

/// Best-over-references fraction of the reference's distinctive words that
/// the candidate reproduces. `None` when no reference shares a word with
/// `omega`.
pub fn dis_word_rate(
    candidate: &TokenSeq,
    omega: &WordSet,
    target_gts: &[TokenSeq],
) -> Result<Option<f64>> {
    if target_gts.is_empty() {
        return Err(Error::Empty("ground-truth set"));
    }
    let cand = candidate.word_set();
    let mut best: Option<f64> = None;
    for gt in target_gts {
        let shared = omega.intersection(&gt.word_set());
        if shared.is_empty() {
            continue;
        }
        let rate = shared.intersection_len(&cand) as f64 / shared.len() as f64;
        best = Some(best.map_or(rate, |b| b.max(rate)));
    }
    Ok(best)
}
