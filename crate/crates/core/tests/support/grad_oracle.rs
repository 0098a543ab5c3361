//! Independent re-statement of `L_xe + L_d + L_m` for one caption example,
//! evaluated in double-double arithmetic, and central differences over it.

use distcap::gdma::AttentionMode;
use distcap::losses::{GradInstance, PROB_FLOOR};

use super::dd::Dd;

struct View<'a> {
    theta: &'a [Dd],
    vocab: usize,
    d: usize,
}

impl View<'_> {
    // omega, b, classifier W (d x V), classifier bias, embed (V x d),
    // query (d x d), output W (d x V), output bias
    fn omega(&self) -> Dd {
        self.theta[0]
    }
    fn b(&self) -> Dd {
        self.theta[1]
    }
    fn cls_w(&self, i: usize, v: usize) -> Dd {
        self.theta[2 + i * self.vocab + v]
    }
    fn cls_b(&self, v: usize) -> Dd {
        self.theta[2 + self.d * self.vocab + v]
    }
    fn embed_base(&self) -> usize {
        2 + self.d * self.vocab + self.vocab
    }
    fn embed(&self, w: usize, i: usize) -> Dd {
        self.theta[self.embed_base() + w * self.d + i]
    }
    fn query(&self, i: usize, k: usize) -> Dd {
        self.theta[self.embed_base() + self.vocab * self.d + i * self.d + k]
    }
    fn out_base(&self) -> usize {
        self.embed_base() + self.vocab * self.d + self.d * self.d
    }
    fn out_w(&self, i: usize, v: usize) -> Dd {
        self.theta[self.out_base() + i * self.vocab + v]
    }
    fn out_b(&self, v: usize) -> Dd {
        self.theta[self.out_base() + self.d * self.vocab + v]
    }
}

fn log_softmax(logits: &[Dd]) -> Vec<Dd> {
    let max = logits.iter().copied().fold(logits[0], Dd::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<Dd>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn softmax(scores: &[Dd]) -> Vec<Dd> {
    log_softmax(scores).into_iter().map(Dd::exp).collect()
}

fn floored_neg_log(log_p: Dd) -> Dd {
    -log_p.max(Dd::new(PROB_FLOOR).ln())
}

/// Which terms of the loss to evaluate.
#[derive(Clone, Copy)]
pub enum Part {
    Decoder,
    Classifier,
    Both,
}

pub fn loss(inst: &GradInstance, theta: &[Dd], part: Part) -> Dd {
    let vocab = inst.params.decoder.vocab();
    let d = inst.params.decoder.d_model();
    let p = View { theta, vocab, d };
    let n = inst.memory.rows();

    let weighted: Vec<Vec<Dd>> = (0..n)
        .map(|j| {
            let a = match inst.mode {
                AttentionMode::Distinctive => p.omega() * Dd::new(inst.scores[j]) + p.b(),
                AttentionMode::Common => Dd::ONE,
            };
            inst.memory.row(j).iter().map(|&m| a * Dd::new(m)).collect()
        })
        .collect();

    let mut total = Dd::ZERO;
    if !matches!(part, Part::Classifier) {
        let scale = Dd::ONE / Dd::new(d as f64).sqrt();
        let mut prev = 0;
        for &target in &inst.caption {
            let e: Vec<Dd> = (0..d).map(|i| p.embed(prev, i)).collect();
            let q: Vec<Dd> = (0..d)
                .map(|k| (0..d).map(|i| e[i] * p.query(i, k)).sum())
                .collect();
            let scores: Vec<Dd> = weighted
                .iter()
                .map(|m| (0..d).map(|k| q[k] * m[k]).sum::<Dd>() * scale)
                .collect();
            let att = softmax(&scores);
            let h: Vec<Dd> = (0..d)
                .map(|i| e[i] + (0..n).map(|j| att[j] * weighted[j][i]).sum())
                .collect();
            let logits: Vec<Dd> = (0..vocab)
                .map(|v| p.out_b(v) + (0..d).map(|i| h[i] * p.out_w(i, v)).sum())
                .collect();
            let log_p = log_softmax(&logits);
            total = total + floored_neg_log(log_p[target]);
            for &(w, lambda) in &inst.words.entries {
                total = total + Dd::new(lambda) * floored_neg_log(log_p[w]);
            }
            prev = target;
        }
    }
    if !matches!(part, Part::Decoder) {
        let inv_n = Dd::ONE / Dd::new(n as f64);
        let pooled: Vec<Dd> = (0..d)
            .map(|i| weighted.iter().map(|m| m[i]).sum::<Dd>() * inv_n)
            .collect();
        for &(w, lambda) in &inst.words.entries {
            let z = p.cls_b(w) + (0..d).map(|i| pooled[i] * p.cls_w(i, w)).sum();
            // log sigmoid(z) = -log(1 + exp(-z))
            let log_sig = if z.hi >= 0.0 {
                -(Dd::ONE + (-z).exp()).ln()
            } else {
                z - (Dd::ONE + z.exp()).ln()
            };
            total = total + Dd::new(lambda) * floored_neg_log(log_sig);
        }
    }
    total
}

/// Central differences with step `h` for every coordinate of the flattened
/// trainable parameters. Coordinates that cannot reach a term are not
/// re-evaluated through it.
pub fn central_differences(inst: &GradInstance, h: f64) -> Vec<f64> {
    let base: Vec<Dd> = inst.params.flatten().into_iter().map(Dd::new).collect();
    let vocab = inst.params.decoder.vocab();
    let d = inst.params.decoder.d_model();
    let classifier_end = 2 + d * vocab + vocab;
    let mut theta = base.clone();
    let two_h = Dd::new(2.0 * h);
    (0..base.len())
        .map(|i| {
            let part = if i < 2 {
                Part::Both
            } else if i < classifier_end {
                Part::Classifier
            } else {
                Part::Decoder
            };
            theta[i] = base[i] + Dd::new(h);
            let plus = loss(inst, &theta, part);
            theta[i] = base[i] - Dd::new(h);
            let minus = loss(inst, &theta, part);
            theta[i] = base[i];
            ((plus - minus) / two_h).to_f64()
        })
        .collect()
}
