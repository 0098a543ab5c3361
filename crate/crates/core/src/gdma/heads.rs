//! Readouts of the weighted target memory: the multi-label memory
//! classifier and a single-step cross-attention decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_unchecked, Linear, Mat, INIT_SCALE};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_rows(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = m.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Mean-pool over rows, linear map to the vocabulary, elementwise sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryClassifier {
    pub linear: Linear,
}

impl MemoryClassifier {
    pub fn init(d_model: usize, vocab: usize, rng: &mut impl Rng) -> Self {
        MemoryClassifier {
            linear: Linear {
                weight: Mat::uniform(d_model, vocab, INIT_SCALE, rng),
                bias: Mat::uniform(1, vocab, INIT_SCALE, rng).into_data(),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (r, c) = self.linear.weight.shape();
        MemoryClassifier {
            linear: Linear {
                weight: Mat::zeros(r, c),
                bias: vec![0.0; c],
            },
        }
    }

    pub fn d_model(&self) -> usize {
        self.linear.weight.rows()
    }

    pub fn vocab(&self) -> usize {
        self.linear.weight.cols()
    }

    fn logits(&self, memory: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        if memory.cols() != self.d_model() || memory.rows() == 0 {
            return Err(Error::Shape(format!(
                "classifier expects width {}, memory is {:?}",
                self.d_model(),
                memory.shape()
            )));
        }
        let pooled = mean_rows(memory);
        let mut z = self.linear.bias.clone();
        for (i, &p) in pooled.iter().enumerate() {
            for (zv, w) in z.iter_mut().zip(self.linear.weight.row(i)) {
                *zv += p * w;
            }
        }
        Ok((pooled, z))
    }

    /// Independent per-word probabilities `P_M`.
    pub fn classify(&self, memory: &Mat) -> Result<Vec<f64>> {
        Ok(self.logits(memory)?.1.into_iter().map(sigmoid).collect())
    }

    /// Accumulates parameter gradients for upstream `dlogits` and returns
    /// the gradient with respect to `memory`.
    pub fn backward(&self, memory: &Mat, dlogits: &[f64], grads: &mut MemoryClassifier) -> Result<Mat> {
        let (pooled, _) = self.logits(memory)?;
        for (i, &p) in pooled.iter().enumerate() {
            for (g, d) in grads.linear.weight.row_mut(i).iter_mut().zip(dlogits) {
                *g += p * d;
            }
        }
        for (g, d) in grads.linear.bias.iter_mut().zip(dlogits) {
            *g += d;
        }
        let n = memory.rows() as f64;
        let dpooled: Vec<f64> = (0..self.d_model())
            .map(|i| dot(self.linear.weight.row(i), dlogits) / n)
            .collect();
        let mut dmem = Mat::zeros(memory.rows(), memory.cols());
        for j in 0..memory.rows() {
            dmem.row_mut(j).copy_from_slice(&dpooled);
        }
        Ok(dmem)
    }
}

/// Previous-token embedding, one scaled dot-product query over the memory
/// rows, residual add, linear map and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub embed: Mat,
    pub w_query: Mat,
    pub out: Linear,
}

/// Intermediate values of one decoder step.
#[derive(Debug, Clone)]
pub struct DecoderStep {
    pub prev: usize,
    pub query: Vec<f64>,
    pub attention: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ToyDecoder {
    pub fn init(vocab: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        ToyDecoder {
            embed: Mat::uniform(vocab, d_model, INIT_SCALE, rng),
            w_query: Mat::uniform(d_model, d_model, INIT_SCALE, rng),
            out: Linear {
                weight: Mat::uniform(d_model, vocab, INIT_SCALE, rng),
                bias: Mat::uniform(1, vocab, INIT_SCALE, rng).into_data(),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        ToyDecoder {
            embed: Mat::zeros(self.embed.rows(), self.embed.cols()),
            w_query: Mat::zeros(self.w_query.rows(), self.w_query.cols()),
            out: Linear {
                weight: Mat::zeros(self.out.weight.rows(), self.out.weight.cols()),
                bias: vec![0.0; self.out.bias.len()],
            },
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embed.cols()
    }

    pub fn forward_step(&self, memory: &Mat, prev: usize) -> Result<DecoderStep> {
        if prev >= self.vocab() {
            return Err(Error::UnknownToken(prev));
        }
        let d = self.d_model();
        if memory.cols() != d || memory.rows() == 0 {
            return Err(Error::Shape(format!(
                "decoder expects width {d}, memory is {:?}",
                memory.shape()
            )));
        }
        let e = self.embed.row(prev);
        let query: Vec<f64> = (0..d)
            .map(|k| (0..d).map(|i| e[i] * self.w_query[(i, k)]).sum())
            .collect();
        let scale = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = memory.row_iter().map(|m| dot(&query, m) * scale).collect();
        let attention = softmax_unchecked(&scores);
        let mut hidden = e.to_vec();
        for (a, m) in attention.iter().zip(memory.row_iter()) {
            for (h, v) in hidden.iter_mut().zip(m) {
                *h += a * v;
            }
        }
        let mut logits = self.out.bias.clone();
        for (i, &h) in hidden.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(self.out.weight.row(i)) {
                *l += h * w;
            }
        }
        Ok(DecoderStep {
            prev,
            query,
            attention,
            hidden,
            probs: softmax_unchecked(&logits),
        })
    }

    /// Next-token distribution `P_t` given the previous token.
    pub fn step(&self, memory: &Mat, prev: usize) -> Result<Vec<f64>> {
        Ok(self.forward_step(memory, prev)?.probs)
    }

    /// Accumulates parameter gradients for upstream `dlogits` into `grads`
    /// and memory gradients into `dmemory`.
    pub fn backward_step(
        &self,
        memory: &Mat,
        step: &DecoderStep,
        dlogits: &[f64],
        grads: &mut ToyDecoder,
        dmemory: &mut Mat,
    ) {
        let d = self.d_model();
        for (i, &h) in step.hidden.iter().enumerate() {
            for (g, dl) in grads.out.weight.row_mut(i).iter_mut().zip(dlogits) {
                *g += h * dl;
            }
        }
        for (g, dl) in grads.out.bias.iter_mut().zip(dlogits) {
            *g += dl;
        }
        let dhidden: Vec<f64> = (0..d).map(|i| dot(self.out.weight.row(i), dlogits)).collect();

        // context = sum_j a_j m_j
        let dattn: Vec<f64> = memory.row_iter().map(|m| dot(&dhidden, m)).collect();
        for (j, &a) in step.attention.iter().enumerate() {
            for (dm, dh) in dmemory.row_mut(j).iter_mut().zip(&dhidden) {
                *dm += a * dh;
            }
        }
        let weighted: f64 = step.attention.iter().zip(&dattn).map(|(a, g)| a * g).sum();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dquery = vec![0.0; d];
        for (j, m) in memory.row_iter().enumerate() {
            let dscore = step.attention[j] * (dattn[j] - weighted) * scale;
            for (dq, v) in dquery.iter_mut().zip(m) {
                *dq += dscore * v;
            }
            for (dm, q) in dmemory.row_mut(j).iter_mut().zip(&step.query) {
                *dm += dscore * q;
            }
        }
        let e = self.embed.row(step.prev);
        let mut dembed = dhidden;
        for i in 0..d {
            for (k, &dq) in dquery.iter().enumerate() {
                grads.w_query[(i, k)] += e[i] * dq;
                dembed[i] += self.w_query[(i, k)] * dq;
            }
        }
        for (g, de) in grads.embed.row_mut(step.prev).iter_mut().zip(&dembed) {
            *g += de;
        }
    }
}
