//! Training objectives: cross-entropy, the weighted distinctive-word loss,
//! the memory classification loss and the self-critical reward, plus their
//! adaptive combination.

mod grad;
mod scst;
mod toy;

pub use grad::{
    analytic_gradients, example_losses, finite_difference, gradient_check, relative_error,
    CaptionExample, GradCheckRow, GradInstance, LossWeights, Trainable,
};
pub use scst::{greedy_decode, reinforce_gradient, sample_decode, scst_step, ScstOutcome};
pub use toy::{
    planted_task, train_toy, trend_decreasing, LogEntry, ToyConfig, ToyEvaluation, ToyOutcome,
    ToyTask, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::distinct::DistinctProfile;
use crate::error::{Error, Result};
use crate::metrics::CiderScorer;
use crate::text::TokenSeq;
use crate::vocab::Vocab;

pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

fn check_steps(dists: &[Vec<f64>], len: usize) -> Result<()> {
    if dists.len() != len {
        return Err(Error::Shape(format!(
            "{} step distributions for a caption of length {len}",
            dists.len()
        )));
    }
    Ok(())
}

/// `-Σ_t log P_t(w_t)`.
pub fn xe_loss(dists: &[Vec<f64>], caption: &[usize]) -> Result<f64> {
    check_steps(dists, caption.len())?;
    caption
        .iter()
        .zip(dists)
        .map(|(&w, p)| p.get(w).map(|&v| neg_log(v)).ok_or(Error::UnknownToken(w)))
        .sum()
}

/// A distinctive profile mapped onto vocabulary ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedWords {
    pub entries: Vec<(usize, f64)>,
    /// Distinctive words missing from the vocabulary.
    pub skipped: usize,
}

impl WeightedWords {
    pub fn resolve(profile: &DistinctProfile, vocab: &Vocab) -> Self {
        let mut out = WeightedWords::default();
        for (word, lambda) in profile.iter() {
            match vocab.id(word) {
                Some(id) => out.entries.push((id, lambda)),
                None => out.skipped += 1,
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check(&self, width: usize) -> Result<()> {
        match self.entries.iter().find(|(id, _)| *id >= width) {
            Some(&(id, _)) => Err(Error::UnknownToken(id)),
            None => Ok(()),
        }
    }
}

/// `-Σ_t Σ_i λ_i log P_t(ω_i)`, summed over every timestep.
pub fn weighted_distinctive_loss(dists: &[Vec<f64>], words: &WeightedWords) -> Result<f64> {
    let mut total = 0.0;
    for p in dists {
        words.check(p.len())?;
        for &(id, lambda) in &words.entries {
            total += lambda * neg_log(p[id]);
        }
    }
    Ok(total)
}

/// `-Σ_k λ_k log P_M(ω_k)`.
pub fn mem_cls_loss(p_m: &[f64], words: &WeightedWords) -> Result<f64> {
    words.check(p_m.len())?;
    Ok(words
        .entries
        .iter()
        .map(|&(id, lambda)| lambda * neg_log(p_m[id]))
        .sum())
}

/// CIDEr-D reward of a sampled caption: the same quantity as the metric's
/// target similarity `s_0`.
pub fn rl_reward(sampled: &TokenSeq, gts: &[TokenSeq], scorer: &CiderScorer) -> Result<f64> {
    scorer.per_image_similarity(sampled, gts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Cross-entropy base loss.
    #[default]
    One,
    /// Self-critical reward base loss.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::InvalidParameter(format!("stage must be 1 or 2, got {v}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub xe: f64,
    pub rl: f64,
    pub dis: f64,
    pub mem: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub xe: f64,
    pub rl: f64,
    pub dis: f64,
    pub mem: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub xe: f64,
    pub rl: f64,
    pub dis: f64,
    pub mem: f64,
    pub alphas: Alphas,
    pub total: f64,
}

fn quarter(base: f64, loss: f64) -> f64 {
    if loss > 0.0 {
        0.25 * base / loss
    } else {
        0.0
    }
}

/// Weights the components so the distinctive and classification terms each
/// contribute a quarter of the base loss. The base is `L_xe` in stage 1 and
/// `|L_r|` in stage 2 (the reward loss is a negated CIDEr and usually
/// negative).
pub fn combine(losses: LossComponents, stage: Stage) -> Result<LossBreakdown> {
    let LossComponents { xe, rl, dis, mem } = losses;
    if ![xe, rl, dis, mem].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    if dis < 0.0 || mem < 0.0 {
        return Err(Error::InvalidParameter("negative distinctive loss".into()));
    }
    let (a_xe, a_rl, base) = match stage {
        Stage::One => (1.0, 0.0, xe),
        Stage::Two => (0.0, 1.0, rl.abs()),
    };
    let alphas = Alphas {
        xe: a_xe,
        rl: a_rl,
        dis: quarter(base, dis),
        mem: quarter(base, mem),
    };
    let total = alphas.xe * xe + alphas.rl * rl + alphas.dis * dis + alphas.mem * mem;
    Ok(LossBreakdown {
        xe,
        rl,
        dis,
        mem,
        alphas,
        total,
    })
}
