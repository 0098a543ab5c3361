//! Group-based differential memory attention.
//!
//! Each image of a group is encoded alone (`M_k`) and as a segment of the
//! jointly encoded group (`M^u_k`). Their difference `M̃_k` feeds a cosine
//! similarity against every other member; column maxima, a negated mean and
//! a softmax give per-region distinctiveness `D`, and `A = ωD + b` reweights
//! the target's difference memory before decoding.

mod heads;

pub use heads::{sigmoid, DecoderStep, MemoryClassifier, ToyDecoder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, mha_forward, norm, softmax_unchecked, EncoderParams, Mat};

/// `f_en(X)`: input projection followed by every encoder layer.
pub fn encode(x: &Mat, params: &EncoderParams) -> Result<Mat> {
    Ok(encode_layers(x, params)?
        .pop()
        .expect("encoder has at least the projected input"))
}

/// Projected input followed by the output of each encoder layer.
pub fn encode_layers(x: &Mat, params: &EncoderParams) -> Result<Vec<Mat>> {
    let mut outputs = vec![params.project_input(x)?];
    for l in 0..params.layers.len() {
        let next = mha_forward(outputs.last().expect("nonempty"), params, l)?;
        outputs.push(next);
    }
    if outputs.len() > 1 {
        outputs.remove(0);
    }
    Ok(outputs)
}

fn split_rows(joint: &Mat, counts: &[usize]) -> Vec<Mat> {
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let seg = joint.slice_rows(start, start + n);
            start += n;
            seg
        })
        .collect()
}

fn concat(features: &[&Mat]) -> Result<(Mat, Vec<usize>)> {
    if features.is_empty() {
        return Err(Error::Empty("image group"));
    }
    let counts = features.iter().map(|m| m.rows()).collect();
    Ok((Mat::vstack(features)?, counts))
}

/// Encodes the row-concatenation of the group and splits the result back
/// into per-image segments `M^u_k`.
pub fn encode_union(features: &[&Mat], params: &EncoderParams) -> Result<Vec<Mat>> {
    let (joint, counts) = concat(features)?;
    Ok(split_rows(&encode(&joint, params)?, &counts))
}

/// `M̃ = M - M^u`.
pub fn memory_difference(solo: &Mat, union: &Mat) -> Result<Mat> {
    solo.sub(union)
}

/// `R[i][j] = cos(m̃_k^i, m̃_0^j)`; a zero row has similarity 0 to everything.
pub fn similarity_matrix(similar: &Mat, target: &Mat) -> Result<Mat> {
    if similar.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "memory widths {} vs {}",
            similar.cols(),
            target.cols()
        )));
    }
    let target_norms: Vec<f64> = target.row_iter().map(norm).collect();
    let mut r = Mat::zeros(similar.rows(), target.rows());
    for (i, mi) in similar.row_iter().enumerate() {
        let ni = norm(mi);
        for (j, mj) in target.row_iter().enumerate() {
            let nj = target_norms[j];
            r[(i, j)] = if ni == 0.0 || nj == 0.0 {
                0.0
            } else {
                (dot(mi, mj) / (ni * nj)).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(r)
}

/// Column maxima of `R_k`: the best-matching region of the similar image for
/// each target region.
pub fn object_image_similarity(r: &Mat) -> Result<Vec<f64>> {
    if r.rows() == 0 {
        return Err(Error::Empty("similarity matrix"));
    }
    Ok((0..r.cols())
        .map(|j| {
            (0..r.rows())
                .map(|i| r[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// `d_j = -(1/K) Σ_k R̃_k^j` and `D = softmax(d)`.
pub fn distinctiveness_scores(maps: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = maps.first().ok_or(Error::Empty("similar image list"))?;
    let n0 = first.len();
    if maps.iter().any(|m| m.len() != n0) {
        return Err(Error::Shape("object-image maps of differing length".into()));
    }
    let k = maps.len() as f64;
    let raw: Vec<f64> = (0..n0)
        .map(|j| -maps.iter().map(|m| m[j]).sum::<f64>() / k)
        .collect();
    let normalized = softmax_unchecked(&raw);
    Ok((raw, normalized))
}

/// Learnable scale `ω` and floor `b` of the distinctive attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub omega: f64,
    pub bias: f64,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            omega: 1.0,
            bias: 0.5,
        }
    }
}

impl AttentionParams {
    /// Clamps both parameters at zero.
    pub fn clip(&mut self) {
        self.omega = self.omega.max(0.0);
        self.bias = self.bias.max(0.0);
    }
}

/// Whether a ground-truth caption is supervised with distinctive attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Distinctive,
    /// `A = 1`.
    Common,
}

/// `A = ωD + b` in distinctive mode, all ones in common mode.
pub fn distinctive_attention(
    scores: &[f64],
    params: AttentionParams,
    mode: AttentionMode,
) -> Result<Vec<f64>> {
    if params.omega < 0.0 || params.bias < 0.0 || !params.omega.is_finite() || !params.bias.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "attention parameters must be nonnegative (omega={}, b={})",
            params.omega, params.bias
        )));
    }
    Ok(match mode {
        AttentionMode::Distinctive => scores
            .iter()
            .map(|&d| params.omega * d + params.bias)
            .collect(),
        AttentionMode::Common => vec![1.0; scores.len()],
    })
}

/// Row `j` of the target memory scaled by `a_j`.
pub fn weight_memory(memory: &Mat, attention: &[f64]) -> Result<Mat> {
    if attention.len() != memory.rows() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} memory rows",
            attention.len(),
            memory.rows()
        )));
    }
    let mut out = memory.clone();
    for (j, &a) in attention.iter().enumerate() {
        out.row_mut(j).iter_mut().for_each(|v| *v *= a);
    }
    Ok(out)
}

/// Where differential attention is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GdmaPlacement {
    /// Once, on the final encoder layer's memories.
    #[default]
    FinalLayer,
    /// Separately on every encoder layer's memories.
    EveryLayer,
}

/// Solo, union and difference memories of every member of one group at one
/// encoder depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub solo: Vec<Mat>,
    pub union: Vec<Mat>,
    pub difference: Vec<Mat>,
}

/// Everything the attention computes for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    /// Indices of the similar images in the bank, in order.
    pub similars: Vec<usize>,
    pub similarity: Vec<Vec<Vec<f64>>>,
    pub object_image: Vec<Vec<f64>>,
    pub raw: Vec<f64>,
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
}

fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

impl MemoryBank {
    /// Encodes a group (target first) at the final layer.
    pub fn build(features: &[&Mat], params: &EncoderParams) -> Result<Self> {
        Ok(Self::build_layers(features, params, GdmaPlacement::FinalLayer)?
            .pop()
            .expect("at least one bank"))
    }

    /// One bank per encoder layer for [`GdmaPlacement::EveryLayer`], a
    /// single final-layer bank otherwise.
    pub fn build_layers(
        features: &[&Mat],
        params: &EncoderParams,
        placement: GdmaPlacement,
    ) -> Result<Vec<Self>> {
        let (joint, counts) = concat(features)?;
        let solo_layers = features
            .iter()
            .map(|x| encode_layers(x, params))
            .collect::<Result<Vec<_>>>()?;
        let union_layers = encode_layers(&joint, params)?;
        let depth = union_layers.len();
        let depths: Vec<usize> = match placement {
            GdmaPlacement::FinalLayer => vec![depth - 1],
            GdmaPlacement::EveryLayer => (0..depth).collect(),
        };
        depths
            .into_iter()
            .map(|l| {
                let solo: Vec<Mat> = solo_layers.iter().map(|s| s[l].clone()).collect();
                let union = split_rows(&union_layers[l], &counts);
                let difference = solo
                    .iter()
                    .zip(&union)
                    .map(|(s, u)| memory_difference(s, u))
                    .collect::<Result<Vec<_>>>()?;
                Ok(MemoryBank {
                    solo,
                    union,
                    difference,
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.difference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difference.is_empty()
    }

    /// Distinctive attention for member `target` against all other members.
    /// A group without similar images gets uniform scores.
    pub fn attend(
        &self,
        target: usize,
        params: AttentionParams,
        mode: AttentionMode,
    ) -> Result<AttentionState> {
        let t = self
            .difference
            .get(target)
            .ok_or_else(|| Error::InvalidParameter(format!("no group member {target}")))?;
        let similars: Vec<usize> = (0..self.len()).filter(|&k| k != target).collect();
        let mut similarity = Vec::with_capacity(similars.len());
        let mut object_image = Vec::with_capacity(similars.len());
        for &k in &similars {
            let r = similarity_matrix(&self.difference[k], t)?;
            object_image.push(object_image_similarity(&r)?);
            similarity.push(mat_rows(&r));
        }
        let (raw, scores) = if similars.is_empty() {
            let raw = vec![0.0; t.rows()];
            let s = softmax_unchecked(&raw);
            (raw, s)
        } else {
            distinctiveness_scores(&object_image)?
        };
        let attention = distinctive_attention(&scores, params, mode)?;
        Ok(AttentionState {
            similars,
            similarity,
            object_image,
            raw,
            scores,
            attention,
        })
    }

    /// `M'` for member `target`.
    pub fn weighted_memory(&self, target: usize, state: &AttentionState) -> Result<Mat> {
        weight_memory(&self.difference[target], &state.attention)
    }
}
