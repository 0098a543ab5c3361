use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{bleu, dis_word_rate, group_similarities, rank_of_target, CiderScorer};
use crate::dataset::CaptionDataset;
use crate::distinct::group_distinct_words;
use crate::error::{Error, Result};
use crate::groups::ImageGroup;
use crate::text::{TokenSeq, WordSet, MAX_ORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub cider: f64,
    pub cider_btw: f64,
    pub cider_rank: usize,
    pub dis_word_rate: Option<f64>,
    /// Sentence-level BLEU-1..4, ×100.
    pub bleu: [f64; MAX_ORDER],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeans {
    pub cider: f64,
    pub cider_btw: f64,
    pub cider_rank: f64,
    /// `None` when every image was excluded.
    pub dis_word_rate: Option<f64>,
    pub bleu: [f64; MAX_ORDER],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageRecord>,
    pub means: CorpusMeans,
    /// Corpus-level BLEU-1..4 over all rows, ×100.
    pub corpus_bleu: [f64; MAX_ORDER],
    /// Rows whose DisWordRate is undefined and left out of its mean.
    pub dis_word_rate_excluded: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores one candidate per group target. Rows are ordered by target id
/// (stable for repeated targets).
///
/// `omegas` supplies precomputed distinctive word sets; targets without one
/// get theirs from the group.
pub fn corpus_report(
    scorer: &CiderScorer,
    candidates: &BTreeMap<String, TokenSeq>,
    dataset: &CaptionDataset,
    groups: &[ImageGroup],
    omegas: &BTreeMap<String, WordSet>,
) -> Result<MetricReport> {
    if groups.is_empty() {
        return Err(Error::Empty("group list"));
    }
    let mut ordered: Vec<&ImageGroup> = groups.iter().collect();
    ordered.sort_by(|a, b| a.target.cmp(&b.target));

    let mut images = Vec::with_capacity(ordered.len());
    let mut bleu_cands = Vec::with_capacity(ordered.len());
    let mut bleu_refs = Vec::with_capacity(ordered.len());
    for group in ordered {
        let id = &group.target;
        let cand = candidates
            .get(id)
            .ok_or_else(|| Error::MissingCandidate(id.clone()))?;
        let gts = dataset.gts(id)?;
        let sims = group_similarities(scorer, cand, group, dataset)?;
        let cider_btw = if sims.len() > 1 {
            sims[1..].iter().sum::<f64>() / (sims.len() - 1) as f64
        } else {
            return Err(Error::Empty("similar image list"));
        };
        let computed;
        let omega = match omegas.get(id) {
            Some(o) => o,
            None => {
                computed = group_distinct_words(group, dataset)?;
                &computed
            }
        };
        let mut sentence_bleu = [0.0; MAX_ORDER];
        for (n, slot) in sentence_bleu.iter_mut().enumerate() {
            *slot = 100.0 * bleu(std::slice::from_ref(cand), &[gts.to_vec()], n + 1)?;
        }
        images.push(ImageRecord {
            image_id: id.clone(),
            cider: scorer.cider(cand, gts)?,
            cider_btw,
            cider_rank: rank_of_target(&sims),
            dis_word_rate: dis_word_rate(cand, omega, gts)?,
            bleu: sentence_bleu,
        });
        bleu_cands.push(cand.clone());
        bleu_refs.push(gts.to_vec());
    }

    let mut corpus_bleu = [0.0; MAX_ORDER];
    for (n, slot) in corpus_bleu.iter_mut().enumerate() {
        *slot = 100.0 * bleu(&bleu_cands, &bleu_refs, n + 1)?;
    }
    let mut mean_bleu = [0.0; MAX_ORDER];
    for (n, slot) in mean_bleu.iter_mut().enumerate() {
        *slot = mean(images.iter().map(|r| r.bleu[n])).unwrap_or(0.0);
    }
    let means = CorpusMeans {
        cider: mean(images.iter().map(|r| r.cider)).unwrap_or(0.0),
        cider_btw: mean(images.iter().map(|r| r.cider_btw)).unwrap_or(0.0),
        cider_rank: mean(images.iter().map(|r| r.cider_rank as f64)).unwrap_or(0.0),
        dis_word_rate: mean(images.iter().filter_map(|r| r.dis_word_rate)),
        bleu: mean_bleu,
    };
    let excluded = images.iter().filter(|r| r.dis_word_rate.is_none()).count();
    Ok(MetricReport {
        images,
        means,
        corpus_bleu,
        dis_word_rate_excluded: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn fixture() -> (CaptionDataset, Vec<ImageGroup>, BTreeMap<String, TokenSeq>) {
        let ds = CaptionDataset::new(
            [
                ("a", vec!["a red frisbee in a park", "a dog in a park"]),
                ("b", vec!["a dog in a park", "a brown dog running"]),
                ("c", vec!["a cat on a sofa", "a sleeping cat"]),
                ("d", vec!["a cat on a bed", "a white cat"]),
            ]
            .into_iter()
            .map(|(id, caps)| (id.to_owned(), caps.into_iter().map(str::to_owned).collect())),
        )
        .unwrap();
        let groups = vec![
            ImageGroup::new("c", vec!["d".into()]).unwrap(),
            ImageGroup::new("a", vec!["b".into()]).unwrap(),
        ];
        let cands = [
            ("a", "a red frisbee in a park"),
            ("c", "a cat on a sofa"),
            ("b", "a dog"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), tokenize(v)))
        .collect();
        (ds, groups, cands)
    }

    #[test]
    fn rows_sorted_and_means_consistent() {
        let (ds, groups, cands) = fixture();
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let r = corpus_report(&scorer, &cands, &ds, &groups, &BTreeMap::new()).unwrap();
        let ids: Vec<&str> = r.images.iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        let m = (r.images[0].cider + r.images[1].cider) / 2.0;
        assert_eq!(r.means.cider, m);
        assert_eq!(r.images[0].dis_word_rate, Some(1.0));
        assert_eq!(r.dis_word_rate_excluded, 0);
        for img in &r.images {
            assert!((0.0..=10.0).contains(&img.cider));
            assert!((1..=2).contains(&img.cider_rank));
        }
    }

    #[test]
    fn single_group_means_equal_row() {
        let (ds, groups, cands) = fixture();
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let r = corpus_report(&scorer, &cands, &ds, &groups[..1], &BTreeMap::new()).unwrap();
        let row = &r.images[0];
        assert_eq!(r.means.cider, row.cider);
        assert_eq!(r.means.cider_btw, row.cider_btw);
        assert_eq!(r.means.cider_rank, row.cider_rank as f64);
        assert_eq!(r.means.dis_word_rate, row.dis_word_rate);
        assert_eq!(r.means.bleu, row.bleu);
    }

    #[test]
    fn duplicate_groups_give_identical_rows() {
        let (ds, groups, cands) = fixture();
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let doubled = vec![groups[1].clone(), groups[1].clone()];
        let r = corpus_report(&scorer, &cands, &ds, &doubled, &BTreeMap::new()).unwrap();
        assert_eq!(r.images[0], r.images[1]);
    }

    #[test]
    fn missing_candidate_is_named() {
        let (ds, _, cands) = fixture();
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let g = vec![ImageGroup::new("d", vec!["c".into()]).unwrap()];
        let err = corpus_report(&scorer, &cands, &ds, &g, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingCandidate(id) if id == "d"));
    }

    #[test]
    fn empty_omega_is_excluded() {
        let (ds, groups, cands) = fixture();
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let mut omegas = BTreeMap::new();
        omegas.insert("a".to_owned(), WordSet::new());
        let r = corpus_report(&scorer, &cands, &ds, &groups, &omegas).unwrap();
        assert_eq!(r.images[0].dis_word_rate, None);
        assert_eq!(r.dis_word_rate_excluded, 1);
        assert_eq!(r.means.dis_word_rate, r.images[1].dis_word_rate);
    }
}
