//! The toy training loop: every member of every group takes the target role,
//! its ground-truth captions are decoded from the weighted difference memory
//! and the four losses update {ω, b, classifier, decoder} by plain gradient
//! descent.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{analytic_gradients, example_losses, CaptionExample, LossWeights, Trainable};
use super::scst::{greedy_decode, scst_step};
use super::{combine, LossBreakdown, LossComponents, Stage, WeightedWords};
use crate::dataset::CaptionDataset;
use crate::distinct::{group_distinct_words, indicate_captions, CaptionLabel, DistinctProfile, SplitRule};
use crate::error::{Error, Result};
use crate::gdma::{distinctive_attention, weight_memory, AttentionMode, MemoryBank};
use crate::groups::ImageGroup;
use crate::metrics::{dis_word_rate, CiderScorer};
use crate::tensor::{norm, EncoderParams, EncoderShape, Mat};
use crate::text::{TokenSeq, WordSet};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Similar images per group.
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub d_m: usize,
    pub heads: usize,
    pub layers: usize,
    /// Vocabulary size including the start and end markers.
    pub vocab: usize,
    pub groups: usize,
    /// Object regions per image.
    pub regions: usize,
    pub stage: Stage,
    pub split: SplitRule,
    pub max_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            k: 5,
            seed: 0,
            steps: 500,
            learning_rate: 0.06,
            d_m: 32,
            heads: 2,
            layers: 1,
            vocab: 30,
            groups: 3,
            regions: 3,
            stage: Stage::One,
            split: SplitRule::Median,
            max_len: 8,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_owned()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a nonnegative number");
        }
        if self.d_m == 0 || self.heads == 0 || !self.d_m.is_multiple_of(self.heads) {
            return bad("d_m must be a positive multiple of heads");
        }
        if self.groups == 0 || self.regions < 2 || self.max_len == 0 {
            return bad("groups, max_len must be positive and regions at least 2");
        }
        Ok(())
    }
}

/// Captions, region features and groups to train on. The planted maps are
/// filled by [`planted_task`] and empty otherwise.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub dataset: CaptionDataset,
    pub features: BTreeMap<String, Mat>,
    pub groups: Vec<ImageGroup>,
    pub vocab: Vocab,
    pub planted_word: BTreeMap<String, String>,
    pub planted_region: BTreeMap<String, usize>,
}

fn scaled_unit(d: usize, length: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x * length / n).collect();
        }
    }
}

/// Norms of common and planted region features, in units of `sqrt(d_m)`.
const COMMON_SCALE: f64 = 5.0;
const PLANTED_SCALE: f64 = 1.0;

/// Synthetic groups of `K + 1` images. Every image repeats its group's
/// common regions and adds one region of its own at a random position; its
/// captions are "a photo of <own word>" and "a photo of <group word>".
pub fn planted_task(config: &ToyConfig) -> Result<ToyTask> {
    config.validate()?;
    let per_group = config.k + 1;
    let images = config.groups * per_group;
    let needed = 2 + 3 + config.groups + images;
    if config.vocab < needed {
        return Err(Error::InvalidParameter(format!(
            "vocab {} is too small for {} groups of {per_group} (need {needed})",
            config.vocab, config.groups
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut words: Vec<String> = ["a", "photo", "of"].map(str::to_owned).to_vec();
    let group_words: Vec<String> = (0..config.groups).map(|g| format!("scene{g}")).collect();
    words.extend(group_words.iter().cloned());
    let planted: Vec<String> = (0..images).map(|i| format!("thing{i}")).collect();
    words.extend(planted.iter().cloned());
    words.extend((needed..config.vocab).map(|i| format!("filler{i}")));
    let vocab = Vocab::new(&words);

    let mut dataset = CaptionDataset::default();
    let mut features = BTreeMap::new();
    let mut groups = Vec::new();
    let mut planted_word = BTreeMap::new();
    let mut planted_region = BTreeMap::new();
    let root = (config.d_m as f64).sqrt();
    for g in 0..config.groups {
        let common: Vec<Vec<f64>> = (0..config.regions - 1)
            .map(|_| scaled_unit(config.d_m, COMMON_SCALE * root, &mut rng))
            .collect();
        let mut ids = Vec::with_capacity(per_group);
        for i in 0..per_group {
            let n = g * per_group + i;
            let id = format!("g{g}-{i}");
            let mut rows = common.clone();
            let slot = rng.gen_range(0..config.regions);
            rows.insert(slot, scaled_unit(config.d_m, PLANTED_SCALE * root, &mut rng));
            features.insert(id.clone(), Mat::from_rows(&rows)?);
            dataset.push(
                id.clone(),
                vec![
                    format!("a photo of {}", planted[n]),
                    format!("a photo of {}", group_words[g]),
                ],
            )?;
            planted_word.insert(id.clone(), planted[n].clone());
            planted_region.insert(id.clone(), slot);
            ids.push(id);
        }
        ids.shuffle(&mut rng);
        let target = ids.remove(0);
        groups.push(ImageGroup::new(target, ids)?);
    }
    Ok(ToyTask {
        dataset,
        features,
        groups,
        vocab,
        planted_word,
        planted_region,
    })
}

/// One member of a group in the target role.
#[derive(Debug, Clone)]
struct Role {
    image: String,
    memory: Mat,
    scores: Vec<f64>,
    omega: WordSet,
    words: WeightedWords,
    captions: Vec<(Vec<usize>, AttentionMode)>,
}

impl Role {
    fn examples(&self) -> impl Iterator<Item = CaptionExample<'_>> {
        self.captions.iter().map(|(ids, mode)| CaptionExample {
            memory: &self.memory,
            scores: &self.scores,
            mode: *mode,
            caption: ids,
            words: &self.words,
        })
    }
}

fn prepare_roles(task: &ToyTask, config: &ToyConfig, scorer: &CiderScorer) -> Result<Vec<Role>> {
    let width = task
        .features
        .values()
        .next()
        .ok_or(Error::Empty("feature map"))?
        .cols();
    let shape = EncoderShape {
        d_in: width,
        ..EncoderShape::new(config.d_m, config.heads, config.layers)
    };
    let encoder = EncoderParams::init(shape, config.seed)?;
    let mut roles = Vec::new();
    for group in &task.groups {
        let feats = group
            .members()
            .map(|id| {
                task.features
                    .get(id)
                    .ok_or_else(|| Error::UnknownId(format!("features for `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = MemoryBank::build(&feats, &encoder)?;
        for k in 0..bank.len() {
            let view = group.with_target(k);
            let state = bank.attend(k, Default::default(), AttentionMode::Distinctive)?;
            let omega = group_distinct_words(&view, &task.dataset)?;
            let profile = DistinctProfile::uniform(view.target.clone(), omega.clone());
            let gts = task.dataset.gts(&view.target)?;
            let labels = indicate_captions(gts, &view, &task.dataset, scorer, config.split)?.labels;
            let captions = gts
                .iter()
                .zip(labels)
                .map(|(c, label)| {
                    let mode = match label {
                        CaptionLabel::Distinctive => AttentionMode::Distinctive,
                        CaptionLabel::Common => AttentionMode::Common,
                    };
                    Ok((task.vocab.encode_caption(c)?, mode))
                })
                .collect::<Result<Vec<_>>>()?;
            roles.push(Role {
                image: view.target.clone(),
                memory: bank.difference[k].clone(),
                scores: state.scores,
                omega,
                words: WeightedWords::resolve(&profile, &task.vocab),
                captions,
            });
        }
    }
    Ok(roles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Trainable,
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(rename = "L_xe")]
    pub xe: f64,
    #[serde(rename = "L_d")]
    pub dis: f64,
    #[serde(rename = "L_m")]
    pub mem: f64,
    #[serde(rename = "L_r")]
    pub rl: f64,
    pub total: f64,
    pub omega: f64,
    pub b: f64,
}

/// Greedy captions and attention statistics after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEvaluation {
    pub captions: BTreeMap<String, TokenSeq>,
    /// Images whose caption contains their planted word.
    pub planted_hits: usize,
    /// Mean DisWordRate over images with a defined rate.
    pub dis_word_rate: Option<f64>,
    pub mean_planted_attention: Option<f64>,
    pub mean_common_attention: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub state: TrainState,
    pub log: Vec<LogEntry>,
    pub evaluation: ToyEvaluation,
}

fn batch_losses(
    params: &Trainable,
    roles: &[Role],
    stage: Stage,
    scorer: &CiderScorer,
    task: &ToyTask,
    config: &ToyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossComponents, Option<Trainable>)> {
    let mut sum = LossComponents::default();
    for role in roles {
        for ex in role.examples() {
            let c = example_losses(params, &ex)?;
            sum.xe += c.xe;
            sum.dis += c.dis;
            sum.mem += c.mem;
        }
    }
    if stage == Stage::One {
        return Ok((sum, None));
    }
    let mut rl_grads = params.zeros_like();
    for role in roles {
        let a = distinctive_attention(&role.scores, params.attention, AttentionMode::Distinctive)?;
        let weighted = weight_memory(&role.memory, &a)?;
        let gts = task.dataset.gts(&role.image)?;
        let out = scst_step(&params.decoder, &weighted, gts, scorer, &task.vocab, config.max_len, rng)?;
        sum.rl -= out.reward_sampled;
        rl_grads.decoder.add_scaled_from(&out.grads);
    }
    Ok((sum, Some(rl_grads)))
}

trait AddScaled {
    fn add_scaled_from(&mut self, other: &Self);
}

impl AddScaled for crate::gdma::ToyDecoder {
    fn add_scaled_from(&mut self, other: &Self) {
        let pairs = [
            (self.embed.data_mut(), other.embed.data()),
            (self.w_query.data_mut(), other.w_query.data()),
            (self.out.weight.data_mut(), other.out.weight.data()),
            (&mut self.out.bias[..], &other.out.bias[..]),
        ];
        for (mine, theirs) in pairs {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }
}

/// Runs `config.steps` full-batch gradient descent steps on `task`.
pub fn train_toy(task: &ToyTask, config: &ToyConfig) -> Result<ToyOutcome> {
    config.validate()?;
    let scorer = CiderScorer::from_dataset(&task.dataset)?;
    let roles = prepare_roles(task, config, &scorer)?;
    let mut params = Trainable::init(task.vocab.len(), config.d_m, config.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let (components, rl_grads) =
            batch_losses(&params, &roles, config.stage, &scorer, task, config, &mut rng)?;
        let breakdown: LossBreakdown =
            combine(components, config.stage).map_err(|_| Error::Diverged { step })?;
        let weights = LossWeights {
            xe: breakdown.alphas.xe,
            dis: breakdown.alphas.dis,
            mem: breakdown.alphas.mem,
        };
        let mut grads = rl_grads.unwrap_or_else(|| params.zeros_like());
        for role in &roles {
            for ex in role.examples() {
                analytic_gradients(&params, &ex, weights, &mut grads)?;
            }
        }
        log.push(LogEntry {
            step,
            xe: breakdown.xe,
            dis: breakdown.dis,
            mem: breakdown.mem,
            rl: breakdown.rl,
            total: breakdown.total,
            omega: params.attention.omega,
            b: params.attention.bias,
        });
        if !breakdown.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        params.add_scaled(-config.learning_rate, &grads);
        params.attention.clip();
        if !params.is_finite() {
            return Err(Error::Diverged { step });
        }
    }

    let evaluation = evaluate(&params, &roles, task, config)?;
    Ok(ToyOutcome {
        state: TrainState {
            params,
            step: config.steps,
            seed: config.seed,
        },
        log,
        evaluation,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn evaluate(params: &Trainable, roles: &[Role], task: &ToyTask, config: &ToyConfig) -> Result<ToyEvaluation> {
    let mut captions = BTreeMap::new();
    let mut hits = 0;
    let mut rates = Vec::new();
    let mut planted_a = Vec::new();
    let mut common_a = Vec::new();
    for role in roles {
        let a = distinctive_attention(&role.scores, params.attention, AttentionMode::Distinctive)?;
        let weighted = weight_memory(&role.memory, &a)?;
        let ids = greedy_decode(&params.decoder, &weighted, config.max_len)?;
        let caption = task.vocab.decode(&ids);
        if let Some(word) = task.planted_word.get(&role.image) {
            if caption.contains(word) {
                hits += 1;
            }
        }
        if let Some(r) = dis_word_rate(&caption, &role.omega, task.dataset.gts(&role.image)?)? {
            rates.push(r);
        }
        if let Some(&slot) = task.planted_region.get(&role.image) {
            for (j, &v) in a.iter().enumerate() {
                if j == slot {
                    planted_a.push(v);
                } else {
                    common_a.push(v);
                }
            }
        }
        captions.insert(role.image.clone(), caption);
    }
    Ok(ToyEvaluation {
        captions,
        planted_hits: hits,
        dis_word_rate: mean(&rates),
        mean_planted_attention: mean(&planted_a),
        mean_common_attention: mean(&common_a),
    })
}

/// Whether the mean total loss of the last `window` entries is below that of
/// the first `window`.
pub fn trend_decreasing(log: &[LogEntry], window: usize) -> bool {
    if window == 0 || log.len() < window {
        return false;
    }
    let avg = |s: &[LogEntry]| s.iter().map(|e| e.total).sum::<f64>() / s.len() as f64;
    avg(&log[log.len() - window..]) < avg(&log[..window])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            k: 2,
            groups: 2,
            vocab: 16,
            d_m: 8,
            steps: 5,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn planted_task_shape() {
        let cfg = small();
        let task = planted_task(&cfg).unwrap();
        assert_eq!(task.dataset.len(), 6);
        assert_eq!(task.vocab.len(), 16);
        assert_eq!(task.groups.len(), 2);
        for g in &task.groups {
            assert_eq!(g.k(), 2);
        }
        for (id, m) in &task.features {
            assert_eq!(m.shape(), (cfg.regions, cfg.d_m));
            let slot = task.planted_region[id];
            let expect = PLANTED_SCALE * (cfg.d_m as f64).sqrt();
            assert!((norm(m.row(slot)) - expect).abs() < 1e-12);
        }
        let too_small = ToyConfig { vocab: 10, ..cfg };
        assert!(planted_task(&too_small).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = ToyConfig {
            learning_rate: 0.0,
            ..small()
        };
        let task = planted_task(&cfg).unwrap();
        let out = train_toy(&task, &cfg).unwrap();
        let init = Trainable::init(task.vocab.len(), cfg.d_m, cfg.seed.wrapping_add(1));
        assert_eq!(out.state.params, init);
        assert!(out.log.windows(2).all(|w| w[0].total == w[1].total));
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = small();
        let task = planted_task(&cfg).unwrap();
        let a = train_toy(&task, &cfg).unwrap();
        let b = train_toy(&task, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn stage_two_runs_and_is_deterministic() {
        let cfg = ToyConfig {
            stage: Stage::Two,
            ..small()
        };
        let task = planted_task(&cfg).unwrap();
        let a = train_toy(&task, &cfg).unwrap();
        let b = train_toy(&task, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.rl <= 0.0 && e.xe > 0.0));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = ToyConfig {
            learning_rate: 1e300,
            steps: 50,
            ..small()
        };
        let task = planted_task(&cfg).unwrap();
        assert!(matches!(train_toy(&task, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn attention_stays_nonnegative() {
        let cfg = ToyConfig {
            learning_rate: 5.0,
            steps: 20,
            ..small()
        };
        let task = planted_task(&cfg).unwrap();
        let out = train_toy(&task, &cfg).unwrap();
        assert!(out.log.iter().all(|e| e.omega >= 0.0 && e.b >= 0.0));
    }

    #[test]
    fn config_parses_flat_json() {
        let cfg: ToyConfig =
            serde_json::from_str(r#"{"K": 3, "seed": 9, "steps": 10, "stage": 2}"#).unwrap();
        assert_eq!((cfg.k, cfg.seed, cfg.steps, cfg.stage), (3, 9, 10, Stage::Two));
        assert_eq!(cfg.vocab, 30);
        assert!(serde_json::from_str::<ToyConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
