//! Dense row-major `f64` matrices and the transformer encoder forward pass.
//!
//! Rows are tokens (object regions), so projections are right-multiplied:
//! `Q = X W_q`. There is no positional encoding; the encoder is
//! permutation-equivariant over rows.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, zero-width matrices yield empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Mat, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Mat {
        self.map(|v| v * factor)
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row(&self, bias: &[f64]) -> Result<Mat> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} on {} columns",
                bias.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Rows of `self` followed by rows of each of `others`.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vstack of differing widths".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Mat {
        let mut out = Mat::zeros(perm.len(), self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(v - mean) / sqrt(var + eps) * gain + bias`, population variance.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| (x - mean) * inv * g + b)
        .collect()
}

fn layer_norm_rows(m: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        out.row_mut(i)
            .copy_from_slice(&layer_norm(m.row(i), gain, bias, LN_EPS));
    }
    out
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine operand".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// `x W + b` over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape("linear bias width".into()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    /// Region feature width; a linear input projection is used when it
    /// differs from `d_model`.
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
}

impl EncoderShape {
    pub fn new(d_model: usize, heads: usize, layers: usize) -> Self {
        EncoderShape {
            d_in: d_model,
            d_model,
            d_ff: 2 * d_model,
            heads,
            layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub input: Option<Linear>,
    pub layers: Vec<EncoderLayer>,
}

pub const INIT_SCALE: f64 = 0.1;

impl EncoderParams {
    /// Seeded uniform(-0.1, 0.1) weights and biases; layer-norm gains 1 and
    /// biases 0.
    pub fn init(shape: EncoderShape, seed: u64) -> Result<Self> {
        if shape.heads == 0 || !shape.d_model.is_multiple_of(shape.heads) {
            return Err(Error::InvalidParameter(format!(
                "{} heads do not divide width {}",
                shape.heads, shape.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.d_model;
        let lin = |i: usize, o: usize, rng: &mut ChaCha8Rng| Linear {
            weight: Mat::uniform(i, o, INIT_SCALE, rng),
            bias: Mat::uniform(1, o, INIT_SCALE, rng).into_data(),
        };
        let input = (shape.d_in != d).then(|| lin(shape.d_in, d, &mut rng));
        let layers = (0..shape.layers)
            .map(|_| EncoderLayer {
                w_q: Mat::uniform(d, d, INIT_SCALE, &mut rng),
                w_k: Mat::uniform(d, d, INIT_SCALE, &mut rng),
                w_v: Mat::uniform(d, d, INIT_SCALE, &mut rng),
                w_o: Mat::uniform(d, d, INIT_SCALE, &mut rng),
                ff1: lin(d, shape.d_ff, &mut rng),
                ff2: lin(shape.d_ff, d, &mut rng),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        Ok(EncoderParams {
            shape,
            input,
            layers,
        })
    }

    /// Checks every matrix against `shape`.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        let d = s.d_model;
        let bad = |what: &str| Err(Error::Shape(format!("encoder parameter {what}")));
        if s.heads == 0 || !d.is_multiple_of(s.heads) {
            return bad("heads");
        }
        if self.layers.len() != s.layers {
            return bad("layer count");
        }
        match (&self.input, s.d_in == d) {
            (None, true) => {}
            (Some(l), false) if l.weight.shape() == (s.d_in, d) && l.bias.len() == d => {}
            _ => return bad("input projection"),
        }
        for l in &self.layers {
            let square = [&l.w_q, &l.w_k, &l.w_v, &l.w_o]
                .iter()
                .all(|m| m.shape() == (d, d));
            let ff = l.ff1.weight.shape() == (d, s.d_ff)
                && l.ff1.bias.len() == s.d_ff
                && l.ff2.weight.shape() == (s.d_ff, d)
                && l.ff2.bias.len() == d;
            let ln = [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias]
                .iter()
                .all(|v| v.len() == d);
            if !(square && ff && ln) {
                return bad("layer shapes");
            }
        }
        Ok(())
    }

    /// Applies the input projection, if any.
    pub fn project_input(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.shape.d_in {
            return Err(Error::Shape(format!(
                "features have width {}, encoder expects {}",
                x.cols(),
                self.shape.d_in
            )));
        }
        match &self.input {
            Some(lin) => lin.forward(x),
            None => Ok(x.clone()),
        }
    }
}

/// Multi-head scaled dot-product self-attention (before the output
/// projection is applied, heads concatenated).
fn multi_head(x: &Mat, layer: &EncoderLayer, heads: usize) -> Result<Mat> {
    let q = x.matmul(&layer.w_q)?;
    let k = x.matmul(&layer.w_k)?;
    let v = x.matmul(&layer.w_v)?;
    let d = x.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = x.rows();
    let mut out = Mat::zeros(n, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let scores: Vec<f64> = (0..n)
                .map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale)
                .collect();
            let weights = softmax_unchecked(&scores);
            let o = &mut out.row_mut(i)[cols.clone()];
            for (j, w) in weights.iter().enumerate() {
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += w * vc;
                }
            }
        }
    }
    out.matmul(&layer.w_o)
}

/// One encoder layer: attention with residual and layer norm, then a ReLU
/// MLP with residual and layer norm.
pub fn mha_forward(x: &Mat, params: &EncoderParams, layer: usize) -> Result<Mat> {
    let l = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidParameter(format!("no encoder layer {layer}")))?;
    if x.cols() != params.shape.d_model {
        return Err(Error::Shape(format!(
            "layer input width {} vs model width {}",
            x.cols(),
            params.shape.d_model
        )));
    }
    let att = multi_head(x, l, params.shape.heads)?;
    let o = layer_norm_rows(&x.add(&att)?, &l.ln1_gain, &l.ln1_bias);
    let hidden = l.ff1.forward(&o)?.map(|v| v.max(0.0));
    let mlp = l.ff2.forward(&hidden)?;
    Ok(layer_norm_rows(&o.add(&mlp)?, &l.ln2_gain, &l.ln2_bias))
}
