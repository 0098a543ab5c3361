//! Corpus BLEU-n with closest-reference brevity penalty and no smoothing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::text::{check_order, ngrams, NGram, TokenSeq};

/// Corpus BLEU of order `n` in `[0, 1]`.
///
/// Modified precisions are pooled over the corpus before the geometric mean.
/// The effective reference length of each candidate is its closest reference
/// length, ties going to the shorter one.
pub fn bleu(candidates: &[TokenSeq], refs: &[Vec<TokenSeq>], n: usize) -> Result<f64> {
    check_order(n)?;
    if candidates.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            refs.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, cand_refs) in candidates.iter().zip(refs) {
        if cand_refs.is_empty() {
            return Err(Error::Empty("reference list"));
        }
        for order in 1..=n {
            let counts = ngrams(cand, order)?;
            let mut max_ref: BTreeMap<&NGram, usize> = BTreeMap::new();
            let ref_counts: Vec<_> = cand_refs
                .iter()
                .map(|r| ngrams(r, order))
                .collect::<Result<_>>()?;
            for rc in &ref_counts {
                for (g, &c) in &rc.counts {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (g, &c) in &counts.counts {
                matched[order - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[order - 1] += counts.total();
        }
        hyp_len += cand.len();
        ref_len += closest_ref_len(cand.len(), cand_refs);
    }

    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    Ok(brevity_penalty(hyp_len, ref_len) * log_precision.exp())
}

fn closest_ref_len(hyp_len: usize, refs: &[TokenSeq]) -> usize {
    refs.iter()
        .map(TokenSeq::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}
