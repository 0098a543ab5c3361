//! Hand-derived gradients of `α_c L_xe + α_d L_d + α_m L_m` with respect to
//! the trainable set {ω, b, classifier, decoder}, and a central-difference
//! checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mem_cls_loss, weighted_distinctive_loss, xe_loss, LossComponents, WeightedWords, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::gdma::{
    distinctive_attention, weight_memory, AttentionMode, AttentionParams, MemoryClassifier,
    ToyDecoder,
};
use crate::tensor::{dot, softmax_unchecked, Mat};
use crate::vocab::BOS_ID;

/// Parameters that receive gradients; the encoder stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub attention: AttentionParams,
    pub classifier: MemoryClassifier,
    pub decoder: ToyDecoder,
}

impl Trainable {
    pub fn init(vocab: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classifier = MemoryClassifier::init(d_model, vocab, &mut rng);
        let decoder = ToyDecoder::init(vocab, d_model, &mut rng);
        Trainable {
            attention: AttentionParams::default(),
            classifier,
            decoder,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Trainable {
            attention: AttentionParams {
                omega: 0.0,
                bias: 0.0,
            },
            classifier: self.classifier.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Named parameter blocks in flattening order.
    pub fn blocks(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("omega", 1),
            ("b", 1),
            ("classifier.weight", self.classifier.linear.weight.data().len()),
            ("classifier.bias", self.classifier.linear.bias.len()),
            ("decoder.embed", self.decoder.embed.data().len()),
            ("decoder.w_query", self.decoder.w_query.data().len()),
            ("decoder.out.weight", self.decoder.out.weight.data().len()),
            ("decoder.out.bias", self.decoder.out.bias.len()),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            std::slice::from_mut(&mut self.attention.omega),
            std::slice::from_mut(&mut self.attention.bias),
            self.classifier.linear.weight.data_mut(),
            &mut self.classifier.linear.bias,
            self.decoder.embed.data_mut(),
            self.decoder.w_query.data_mut(),
            self.decoder.out.weight.data_mut(),
            &mut self.decoder.out.bias,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![self.attention.omega, self.attention.bias];
        out.extend_from_slice(self.classifier.linear.weight.data());
        out.extend_from_slice(&self.classifier.linear.bias);
        out.extend_from_slice(self.decoder.embed.data());
        out.extend_from_slice(self.decoder.w_query.data());
        out.extend_from_slice(self.decoder.out.weight.data());
        out.extend_from_slice(&self.decoder.out.bias);
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|b| b.1).sum();
        if values.len() != total {
            return Err(Error::Shape(format!(
                "{} values for {total} parameters",
                values.len()
            )));
        }
        let mut rest = values;
        for slot in self.slices_mut() {
            let (head, tail) = rest.split_at(slot.len());
            slot.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Trainable) {
        let mut theirs = other.clone();
        for (mine, g) in self.slices_mut().into_iter().zip(theirs.slices_mut()) {
            for (m, v) in mine.iter_mut().zip(g.iter()) {
                *m += alpha * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// One ground-truth caption of one target, with everything the losses need.
#[derive(Debug, Clone, Copy)]
pub struct CaptionExample<'a> {
    /// Difference memory `M̃_0`.
    pub memory: &'a Mat,
    /// Distinctiveness `D`, one per memory row.
    pub scores: &'a [f64],
    pub mode: AttentionMode,
    /// Token ids ending with the end marker.
    pub caption: &'a [usize],
    pub words: &'a WeightedWords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub xe: f64,
    pub dis: f64,
    pub mem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            xe: 1.0,
            dis: 1.0,
            mem: 1.0,
        }
    }
}

impl LossWeights {
    pub fn total(&self, c: &LossComponents) -> f64 {
        self.xe * c.xe + self.dis * c.dis + self.mem * c.mem
    }
}

fn previous_tokens(caption: &[usize]) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(BOS_ID).chain(caption.iter().copied()).take(caption.len())
}

/// Teacher-forced losses of one example.
pub fn example_losses(params: &Trainable, ex: &CaptionExample) -> Result<LossComponents> {
    let a = distinctive_attention(ex.scores, params.attention, ex.mode)?;
    let weighted = weight_memory(ex.memory, &a)?;
    let dists = previous_tokens(ex.caption)
        .map(|prev| params.decoder.step(&weighted, prev))
        .collect::<Result<Vec<_>>>()?;
    let p_m = params.classifier.classify(&weighted)?;
    Ok(LossComponents {
        xe: xe_loss(&dists, ex.caption)?,
        rl: 0.0,
        dis: weighted_distinctive_loss(&dists, ex.words)?,
        mem: mem_cls_loss(&p_m, ex.words)?,
    })
}

/// Accumulates the gradient of the weighted example loss into `grads` and
/// returns the unweighted components.
pub fn analytic_gradients(
    params: &Trainable,
    ex: &CaptionExample,
    weights: LossWeights,
    grads: &mut Trainable,
) -> Result<LossComponents> {
    let a = distinctive_attention(ex.scores, params.attention, ex.mode)?;
    let weighted = weight_memory(ex.memory, &a)?;
    let vocab = params.decoder.vocab();
    let mut dweighted = Mat::zeros(weighted.rows(), weighted.cols());

    let mut dists = Vec::with_capacity(ex.caption.len());
    for (prev, &target) in previous_tokens(ex.caption).zip(ex.caption) {
        let step = params.decoder.forward_step(&weighted, prev)?;
        if target >= vocab {
            return Err(Error::UnknownToken(target));
        }
        // loss_t = -Σ_w c[w] log P(w); dlogits = (Σ active c) P - c
        let mut coeff = vec![0.0; vocab];
        coeff[target] += weights.xe;
        for &(id, lambda) in &ex.words.entries {
            if id >= vocab {
                return Err(Error::UnknownToken(id));
            }
            coeff[id] += weights.dis * lambda;
        }
        let mut mass = 0.0;
        let mut dlogits = vec![0.0; vocab];
        for (w, &c) in coeff.iter().enumerate() {
            if c != 0.0 && step.probs[w] > PROB_FLOOR {
                mass += c;
                dlogits[w] -= c;
            }
        }
        for (dl, p) in dlogits.iter_mut().zip(&step.probs) {
            *dl += mass * p;
        }
        params
            .decoder
            .backward_step(&weighted, &step, &dlogits, &mut grads.decoder, &mut dweighted);
        dists.push(step.probs);
    }

    let p_m = params.classifier.classify(&weighted)?;
    let mut dz = vec![0.0; p_m.len()];
    for &(id, lambda) in &ex.words.entries {
        if p_m[id] > PROB_FLOOR {
            dz[id] += weights.mem * lambda * (p_m[id] - 1.0);
        }
    }
    let dcls = params.classifier.backward(&weighted, &dz, &mut grads.classifier)?;
    dweighted = dweighted.add(&dcls)?;

    if ex.mode == AttentionMode::Distinctive {
        for (j, &d) in ex.scores.iter().enumerate() {
            let da = dot(dweighted.row(j), ex.memory.row(j));
            grads.attention.omega += d * da;
            grads.attention.bias += da;
        }
    }

    Ok(LossComponents {
        xe: xe_loss(&dists, ex.caption)?,
        rl: 0.0,
        dis: weighted_distinctive_loss(&dists, ex.words)?,
        mem: mem_cls_loss(&p_m, ex.words)?,
    })
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every
/// coordinate of the flattened parameters.
pub fn finite_difference(
    params: &Trainable,
    h: f64,
    f: impl Fn(&Trainable) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        probe.set_flat(&theta)?;
        let plus = f(&probe)?;
        theta[i] = base[i] - h;
        probe.set_flat(&theta)?;
        let minus = f(&probe)?;
        theta[i] = base[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error within one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub block: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// A random small instance: memory, scores, caption and distinctive words.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub params: Trainable,
    pub memory: Mat,
    pub scores: Vec<f64>,
    pub mode: AttentionMode,
    pub caption: Vec<usize>,
    pub words: WeightedWords,
}

impl GradInstance {
    /// Up to 8 memory rows, width up to 16, vocabulary up to 20.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n0 = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=16);
        let vocab = rng.gen_range(4..=20);
        let mut params = Trainable::init(vocab, d, rng.gen());
        let theta: Vec<f64> = params
            .flatten()
            .iter()
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        params.set_flat(&theta).expect("same length");
        params.attention = AttentionParams {
            omega: rng.gen_range(0.2..2.0),
            bias: rng.gen_range(0.1..1.0),
        };
        let memory = Mat::uniform(n0, d, 1.0, &mut rng);
        let raw: Vec<f64> = (0..n0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scores = softmax_unchecked(&raw);
        let mode = if rng.gen_bool(0.75) {
            AttentionMode::Distinctive
        } else {
            AttentionMode::Common
        };
        let len = rng.gen_range(1..=5);
        let mut caption: Vec<usize> = (0..len).map(|_| rng.gen_range(2..vocab)).collect();
        caption.push(crate::vocab::EOS_ID);
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let id = rng.gen_range(2..vocab);
            if entries.iter().all(|e| e.0 != id) {
                entries.push((id, rng.gen_range(0.1..=1.0)));
            }
        }
        GradInstance {
            params,
            memory,
            scores,
            mode,
            caption,
            words: WeightedWords { entries, skipped: 0 },
        }
    }

    pub fn example(&self) -> CaptionExample<'_> {
        CaptionExample {
            memory: &self.memory,
            scores: &self.scores,
            mode: self.mode,
            caption: &self.caption,
            words: &self.words,
        }
    }
}

/// Compares analytic and central-difference gradients of
/// `L_xe + L_d + L_m` on [`GradInstance::random`]`(seed)`.
pub fn gradient_check(seed: u64, h: f64, tolerance: f64) -> Result<Vec<GradCheckRow>> {
    let inst = GradInstance::random(seed);
    let ex = inst.example();
    let weights = LossWeights::default();
    let mut grads = inst.params.zeros_like();
    analytic_gradients(&inst.params, &ex, weights, &mut grads)?;
    let analytic = grads.flatten();
    let numeric = finite_difference(&inst.params, h, |p| {
        Ok(weights.total(&example_losses(p, &ex)?))
    })?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for (name, len) in inst.params.blocks() {
        let max_rel_error = (offset..offset + len)
            .map(|i| relative_error(analytic[i], numeric[i]))
            .fold(0.0, f64::max);
        rows.push(GradCheckRow {
            block: name.to_owned(),
            coordinates: len,
            max_rel_error,
            passed: max_rel_error < tolerance,
        });
        offset += len;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let mut p = Trainable::init(5, 3, 1);
        let flat = p.flatten();
        let total: usize = p.blocks().iter().map(|b| b.1).sum();
        assert_eq!(flat.len(), total);
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        p.set_flat(&shifted).unwrap();
        assert_eq!(p.flatten(), shifted);
        assert!(p.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let inst = GradInstance::random(3);
        let mut grads = inst.params.zeros_like();
        let w = LossWeights {
            xe: 0.0,
            dis: 0.0,
            mem: 0.0,
        };
        analytic_gradients(&inst.params, &inst.example(), w, &mut grads).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn common_mode_has_no_attention_gradient() {
        let mut inst = GradInstance::random(4);
        inst.mode = AttentionMode::Common;
        let mut grads = inst.params.zeros_like();
        analytic_gradients(&inst.params, &inst.example(), LossWeights::default(), &mut grads).unwrap();
        assert_eq!((grads.attention.omega, grads.attention.bias), (0.0, 0.0));
    }

    #[test]
    fn omega_gradient_is_score_weighted_attention_gradient() {
        // dL/dω = Σ_j D_j dL/da_j and dL/db = Σ_j dL/da_j, with dL/da_j
        // measured by perturbing single rows of the attention
        let mut inst = GradInstance::random(5);
        inst.mode = AttentionMode::Distinctive;
        let ex = inst.example();
        let mut grads = inst.params.zeros_like();
        analytic_gradients(&inst.params, &ex, LossWeights::default(), &mut grads).unwrap();

        let a = distinctive_attention(&inst.scores, inst.params.attention, inst.mode).unwrap();
        let loss_at = |a: &[f64]| {
            let m = weight_memory(&inst.memory, a).unwrap();
            let dists: Vec<Vec<f64>> = previous_tokens(&inst.caption)
                .map(|p| inst.params.decoder.step(&m, p).unwrap())
                .collect();
            let pm = inst.params.classifier.classify(&m).unwrap();
            xe_loss(&dists, &inst.caption).unwrap()
                + weighted_distinctive_loss(&dists, &inst.words).unwrap()
                + mem_cls_loss(&pm, &inst.words).unwrap()
        };
        let h = 1e-6;
        let da: Vec<f64> = (0..a.len())
            .map(|j| {
                let mut up = a.clone();
                let mut down = a.clone();
                up[j] += h;
                down[j] -= h;
                (loss_at(&up) - loss_at(&down)) / (2.0 * h)
            })
            .collect();
        let omega: f64 = da.iter().zip(&inst.scores).map(|(g, d)| g * d).sum();
        let bias: f64 = da.iter().sum();
        assert!(relative_error(grads.attention.omega, omega) < 1e-6);
        assert!(relative_error(grads.attention.bias, bias) < 1e-6);
    }

    #[test]
    fn checks_pass_on_a_few_seeds() {
        for seed in 0..5 {
            for row in gradient_check(seed, 1e-5, 1e-4).unwrap() {
                assert!(row.passed, "seed {seed}: {row:?}");
            }
        }
    }
}
