//! CIDEr(-D) consensus scoring over document-frequency statistics of a
//! reference corpus.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::CaptionDataset;
use crate::error::{Error, Result};
use crate::text::{ngrams, NGram, TokenSeq, MAX_ORDER};

/// Inverse document frequencies per n-gram order, `idf(g) = ln(N / df(g))`.
///
/// `df` counts the images whose reference set contains the n-gram at least
/// once. Unseen n-grams query as `df = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    corpus_size: usize,
    tables: Vec<BTreeMap<NGram, f64>>,
    unseen: f64,
}

impl IdfTable {
    pub fn build(dataset: &CaptionDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let n_docs = dataset.len();
        let mut df: Vec<BTreeMap<NGram, usize>> = vec![BTreeMap::new(); MAX_ORDER];
        for image in dataset.images() {
            for (order, table) in df.iter_mut().enumerate() {
                let mut seen: BTreeSet<&[String]> = BTreeSet::new();
                for caption in &image.tokens {
                    for window in caption.tokens().windows(order + 1) {
                        seen.insert(window);
                    }
                }
                for gram in seen {
                    *table.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        let total = n_docs as f64;
        let tables = df
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|(g, d)| (g, (total / d as f64).ln()))
                    .collect()
            })
            .collect();
        Ok(IdfTable {
            corpus_size: n_docs,
            tables,
            unseen: total.ln(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        debug_assert!((1..=MAX_ORDER).contains(&gram.len()));
        self.tables[gram.len() - 1]
            .get(gram)
            .copied()
            .unwrap_or(self.unseen)
    }

    /// Every stored n-gram of order `n` with its idf.
    pub fn entries(&self, n: usize) -> impl Iterator<Item = (&NGram, f64)> {
        self.tables[n - 1].iter().map(|(g, &v)| (g, v))
    }

    /// Same table with every idf multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        IdfTable {
            corpus_size: self.corpus_size,
            tables: self
                .tables
                .iter()
                .map(|t| t.iter().map(|(g, v)| (g.clone(), v * factor)).collect())
                .collect(),
            unseen: self.unseen * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// Clipped counts and a Gaussian length penalty.
    #[default]
    CiderD,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiderConfig {
    pub variant: CiderVariant,
    pub sigma: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig {
            variant: CiderVariant::CiderD,
            sigma: 6.0,
        }
    }
}

struct TfIdf {
    vecs: Vec<BTreeMap<NGram, f64>>,
    norms: [f64; MAX_ORDER],
    len: usize,
}

/// CIDEr scorer: corpus idf statistics plus the variant settings.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    idf: IdfTable,
    config: CiderConfig,
}

impl CiderScorer {
    pub fn new(idf: IdfTable) -> Self {
        Self::with_config(idf, CiderConfig::default())
    }

    pub fn with_config(idf: IdfTable, config: CiderConfig) -> Self {
        CiderScorer { idf, config }
    }

    pub fn from_dataset(dataset: &CaptionDataset) -> Result<Self> {
        Ok(Self::new(IdfTable::build(dataset)?))
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn config(&self) -> &CiderConfig {
        &self.config
    }

    fn tfidf(&self, seq: &TokenSeq) -> TfIdf {
        let mut vecs = Vec::with_capacity(MAX_ORDER);
        let mut norms = [0.0; MAX_ORDER];
        for (i, norm) in norms.iter_mut().enumerate() {
            let counts = ngrams(seq, i + 1).expect("order within range");
            let vec: BTreeMap<NGram, f64> = counts
                .counts
                .into_iter()
                .map(|(g, tf)| {
                    let w = tf as f64 * self.idf.idf(&g);
                    (g, w)
                })
                .collect();
            *norm = vec.values().map(|w| w * w).sum::<f64>().sqrt();
            vecs.push(vec);
        }
        TfIdf {
            vecs,
            norms,
            len: seq.len(),
        }
    }

    fn sim(&self, hyp: &TfIdf, reference: &TfIdf) -> [f64; MAX_ORDER] {
        let mut val = [0.0; MAX_ORDER];
        let penalty = match self.config.variant {
            CiderVariant::CiderD => {
                let delta = hyp.len as f64 - reference.len as f64;
                (-(delta * delta) / (2.0 * self.config.sigma * self.config.sigma)).exp()
            }
            CiderVariant::Plain => 1.0,
        };
        for n in 0..MAX_ORDER {
            let mut dot = 0.0;
            for (gram, &h) in &hyp.vecs[n] {
                if let Some(&r) = reference.vecs[n].get(gram) {
                    dot += match self.config.variant {
                        CiderVariant::CiderD => h.min(r) * r,
                        CiderVariant::Plain => h * r,
                    };
                }
            }
            if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= hyp.norms[n] * reference.norms[n];
            }
            val[n] = dot * penalty;
        }
        val
    }

    /// CIDEr of `candidate` against `refs`, in `[0, 10]`.
    pub fn cider(&self, candidate: &TokenSeq, refs: &[TokenSeq]) -> Result<f64> {
        if refs.is_empty() {
            return Err(Error::Empty("reference list"));
        }
        let hyp = self.tfidf(candidate);
        let mut acc = [0.0; MAX_ORDER];
        for reference in refs {
            let r = self.tfidf(reference);
            for (a, v) in acc.iter_mut().zip(self.sim(&hyp, &r)) {
                *a += v;
            }
        }
        let mean = acc.iter().sum::<f64>() / MAX_ORDER as f64;
        Ok(mean / refs.len() as f64 * 10.0)
    }

    /// Mean of single-reference CIDEr calls over `gt_set`.
    pub fn per_image_similarity(&self, candidate: &TokenSeq, gt_set: &[TokenSeq]) -> Result<f64> {
        if gt_set.is_empty() {
            return Err(Error::Empty("ground-truth set"));
        }
        let mut total = 0.0;
        for gt in gt_set {
            total += self.cider(candidate, std::slice::from_ref(gt))?;
        }
        Ok(total / gt_set.len() as f64)
    }
}
