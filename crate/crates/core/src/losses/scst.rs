//! Self-critical sequence training at toy scale: REINFORCE with the greedy
//! caption's reward as baseline.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::rl_reward;
use crate::error::{Error, Result};
use crate::gdma::ToyDecoder;
use crate::metrics::CiderScorer;
use crate::tensor::Mat;
use crate::text::TokenSeq;
use crate::vocab::{Vocab, BOS_ID, EOS_ID};

fn argmax(p: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn decode_with(
    decoder: &ToyDecoder,
    memory: &Mat,
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = BOS_ID;
    while out.len() < max_len {
        let p = decoder.step(memory, prev)?;
        prev = pick(&p)?;
        out.push(prev);
        if prev == EOS_ID {
            break;
        }
    }
    Ok(out)
}

/// Argmax decoding until the end marker or `max_len` tokens.
pub fn greedy_decode(decoder: &ToyDecoder, memory: &Mat, max_len: usize) -> Result<Vec<usize>> {
    decode_with(decoder, memory, max_len, |p| Ok(argmax(p)))
}

/// Multinomial sampling until the end marker or `max_len` tokens.
pub fn sample_decode(
    decoder: &ToyDecoder,
    memory: &Mat,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    decode_with(decoder, memory, max_len, |p| {
        let dist = WeightedIndex::new(p)
            .map_err(|e| Error::NonFinite(format!("sampling distribution: {e}")))?;
        Ok(dist.sample(rng))
    })
}

/// Gradient of `-advantage · Σ_t log P_t(tokens_t)` with respect to the
/// decoder parameters.
pub fn reinforce_gradient(
    decoder: &ToyDecoder,
    memory: &Mat,
    tokens: &[usize],
    advantage: f64,
) -> Result<ToyDecoder> {
    let mut grads = decoder.zeros_like();
    if advantage == 0.0 {
        return Ok(grads);
    }
    let mut dmemory = Mat::zeros(memory.rows(), memory.cols());
    let mut prev = BOS_ID;
    for &tok in tokens {
        let step = decoder.forward_step(memory, prev)?;
        if tok >= decoder.vocab() {
            return Err(Error::UnknownToken(tok));
        }
        let mut dlogits: Vec<f64> = step.probs.iter().map(|p| advantage * p).collect();
        dlogits[tok] -= advantage;
        decoder.backward_step(memory, &step, &dlogits, &mut grads, &mut dmemory);
        prev = tok;
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct ScstOutcome {
    pub sampled: Vec<usize>,
    pub greedy: Vec<usize>,
    pub reward_sampled: f64,
    pub reward_greedy: f64,
    pub advantage: f64,
    pub grads: ToyDecoder,
}

/// Samples one caption from weighted memory `M'`, scores it and the greedy
/// caption against the target's ground truth, and returns the REINFORCE
/// gradient of the sampled tokens scaled by the reward gap.
pub fn scst_step(
    decoder: &ToyDecoder,
    memory: &Mat,
    gts: &[TokenSeq],
    scorer: &CiderScorer,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<ScstOutcome> {
    let sampled = sample_decode(decoder, memory, max_len, rng)?;
    let greedy = greedy_decode(decoder, memory, max_len)?;
    let reward_sampled = rl_reward(&vocab.decode(&sampled), gts, scorer)?;
    let reward_greedy = rl_reward(&vocab.decode(&greedy), gts, scorer)?;
    let advantage = if sampled == greedy {
        0.0
    } else {
        reward_sampled - reward_greedy
    };
    let grads = reinforce_gradient(decoder, memory, &sampled, advantage)?;
    Ok(ScstOutcome {
        sampled,
        greedy,
        reward_sampled,
        reward_greedy,
        advantage,
        grads,
    })
}
