//! File formats.
//!
//! Captions, candidates, groups and distinctive-word profiles are JSON.
//! Embeddings (`DDEM`) and region features (`DDRF`) are little-endian
//! binary files:
//!
//! ```text
//! DDEM: "DDEM" | version u32 = 1 | count u32 | dim u32
//!       then count × [id_len u16 | id (UTF-8) | dim × f32]
//! DDRF: "DDRF" | version u32 = 1 | count u32 | d u32
//!       then count × [id_len u16 | id (UTF-8) | N u32 | N × d f32, row-major]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::CaptionDataset;
use crate::distinct::DistinctProfile;
use crate::error::{Error, Result};
use crate::gdma::{
    AttentionMode, AttentionParams, AttentionState, GdmaPlacement, MemoryBank, MemoryClassifier,
    ToyDecoder,
};
use crate::groups::{EmbeddingKind, EmbeddingStore, ImageGroup};
use crate::losses::Trainable;
use crate::tensor::{EncoderParams, EncoderShape, Linear, Mat};
use crate::text::{TokenSeq, WordSet};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DDEM";
pub const FEATURE_MAGIC: &[u8; 4] = b"DDRF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: format!("invalid UTF-8 at byte {}", e.utf8_error().valid_up_to()),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a whole file as one JSON value; trailing data is rejected.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps objects in a BTreeMap
    let tree = serde_json::to_value(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut text =
        serde_json::to_string_pretty(&tree).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_sorted_json(value)?.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionEntry {
    id: String,
    captions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionFile {
    images: Vec<CaptionEntry>,
}

fn content_error(path: &Path, err: Error) -> Error {
    Error::Format {
        path: path.to_owned(),
        message: err.to_string(),
    }
}

/// `{"images": [{"id": ..., "captions": [...]}, ...]}`.
pub fn read_captions(path: &Path) -> Result<CaptionDataset> {
    let file: CaptionFile = read_json(path)?;
    CaptionDataset::new(file.images.into_iter().map(|e| (e.id, e.captions)))
        .map_err(|e| content_error(path, e))
}

pub fn write_captions(path: &Path, dataset: &CaptionDataset) -> Result<()> {
    let file = CaptionFile {
        images: dataset
            .images()
            .iter()
            .map(|i| CaptionEntry {
                id: i.id.clone(),
                captions: i.captions.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}

/// A captions file with exactly one caption per image.
pub fn read_candidates(path: &Path) -> Result<BTreeMap<String, TokenSeq>> {
    let dataset = read_captions(path)?;
    dataset
        .images()
        .iter()
        .map(|img| match img.tokens.as_slice() {
            [only] => Ok((img.id.clone(), only.clone())),
            _ => Err(Error::Format {
                path: path.to_owned(),
                message: format!(
                    "candidate `{}` has {} captions, expected 1",
                    img.id,
                    img.tokens.len()
                ),
            }),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    groups: Vec<ImageGroup>,
}

/// `{"groups": [{"target": ..., "similars": [...], "leftover": bool}, ...]}`.
pub fn read_groups(path: &Path) -> Result<Vec<ImageGroup>> {
    let file: GroupFile = read_json(path)?;
    for g in &file.groups {
        g.validate().map_err(|e| content_error(path, e))?;
    }
    Ok(file.groups)
}

pub fn write_groups(path: &Path, groups: &[ImageGroup]) -> Result<()> {
    write_json(
        path,
        &GroupFile {
            groups: groups.to_vec(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    profiles: Vec<DistinctProfile>,
}

/// `{"profiles": [{"target": ..., "omega": [...], "weights": {...}}, ...]}`.
pub fn read_profiles(path: &Path) -> Result<Vec<DistinctProfile>> {
    let file: ProfileFile = read_json(path)?;
    Ok(file.profiles)
}

pub fn write_profiles(path: &Path, profiles: &[DistinctProfile]) -> Result<()> {
    write_json(
        path,
        &ProfileFile {
            profiles: profiles.to_vec(),
        },
    )
}

/// Distinctive word sets keyed by target.
pub fn profile_words(profiles: &[DistinctProfile]) -> BTreeMap<String, WordSet> {
    profiles
        .iter()
        .map(|p| (p.target.clone(), p.omega.clone()))
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Binary {
            context: self.context.to_owned(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn id(&mut self) -> Result<String> {
        let len = self.u16("id length")? as usize;
        let start = self.pos;
        let raw = self.take(len, "id")?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(start, "id is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.error(start, "record size overflows"))?;
        let raw = self.take(len, "float payload")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.error(start + 4 * i, "non-finite float"));
        }
        Ok(values)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(usize, usize)> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(self.error(0, format!("bad magic {found:?}, expected {magic:?}")));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.error(4, format!("unsupported version {version}")));
        }
        let count = self.u32("count")? as usize;
        let width = self.u32("width")? as usize;
        Ok((count, width))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(self.pos, "trailing bytes after last record"));
        }
        Ok(())
    }
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], count: usize, width: usize) -> Result<()> {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&checked_u32(count, "record count")?.to_le_bytes());
    out.extend_from_slice(&checked_u32(width, "width")?.to_le_bytes());
    Ok(())
}

fn checked_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{what} {v} exceeds u32")))
}

fn put_id(out: &mut Vec<u8>, id: &str) -> Result<()> {
    let len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidParameter(format!("id of {} bytes exceeds u16", id.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    Ok(())
}

pub fn decode_embeddings(bytes: &[u8], kind: EmbeddingKind, context: &str) -> Result<EmbeddingStore> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        context,
    };
    let (count, dim) = cur.header(EMBEDDING_MAGIC)?;
    let mut store = EmbeddingStore::new(dim, kind);
    for _ in 0..count {
        let start = cur.pos;
        let id = cur.id()?;
        let vector = cur.floats(dim)?;
        store.insert(id, vector).map_err(|e| cur.error(start, e.to_string()))?;
    }
    cur.finish()?;
    Ok(store)
}

pub fn encode_embeddings(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + store.len() * (2 + 4 * store.dim()));
    put_header(&mut out, EMBEDDING_MAGIC, store.len(), store.dim())?;
    for (id, v) in store.iter() {
        put_id(&mut out, id)?;
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_embeddings(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingStore> {
    decode_embeddings(&read_bytes(path)?, kind, &path.display().to_string())
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    write_bytes(path, &encode_embeddings(store)?)
}

/// Per-image `N × d` region feature matrices sharing one width `d`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionFeatures {
    pub d: usize,
    pub images: BTreeMap<String, Mat>,
}

impl RegionFeatures {
    pub fn new(d: usize) -> Self {
        RegionFeatures {
            d,
            images: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, features: Mat) -> Result<()> {
        let id = id.into();
        if features.cols() != self.d || features.rows() == 0 {
            return Err(Error::Shape(format!(
                "features of `{id}` are {:?}, expected N x {} with N >= 1",
                features.shape(),
                self.d
            )));
        }
        if self.images.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.images.insert(id, features);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Mat> {
        self.images
            .get(id)
            .ok_or_else(|| Error::UnknownId(format!("features for `{id}`")))
    }
}

pub fn decode_region_features(bytes: &[u8], context: &str) -> Result<RegionFeatures> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        context,
    };
    let (count, d) = cur.header(FEATURE_MAGIC)?;
    let mut out = RegionFeatures::new(d);
    for _ in 0..count {
        let start = cur.pos;
        let id = cur.id()?;
        let n = cur.u32("region count")? as usize;
        let total = n
            .checked_mul(d)
            .ok_or_else(|| cur.error(start, "record size overflows"))?;
        let values = cur.floats(total)?;
        let mat = Mat::from_vec(n, d, values.into_iter().map(f64::from).collect())?;
        out.insert(id, mat).map_err(|e| cur.error(start, e.to_string()))?;
    }
    cur.finish()?;
    Ok(out)
}

/// Values are stored as `f32`; matrices read from a feature file re-encode
/// to identical bytes.
pub fn encode_region_features(features: &RegionFeatures) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(&mut out, FEATURE_MAGIC, features.images.len(), features.d)?;
    for (id, m) in &features.images {
        if m.cols() != features.d {
            return Err(Error::Shape(format!("features of `{id}` have width {}", m.cols())));
        }
        put_id(&mut out, id)?;
        out.extend_from_slice(&checked_u32(m.rows(), "region count")?.to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_region_features(path: &Path) -> Result<RegionFeatures> {
    decode_region_features(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_region_features(path: &Path, features: &RegionFeatures) -> Result<()> {
    write_bytes(path, &encode_region_features(features)?)
}

/// Trainable parameters as a width-1 feature file: each matrix is one
/// record named `<name>@<rows>x<cols>` whose rows are its entries in
/// row-major order. Values are rounded to `f32`.
pub fn checkpoint_features(params: &Trainable) -> Result<RegionFeatures> {
    let mut out = RegionFeatures::new(1);
    let column = |m: &Mat| Mat::from_vec(m.data().len(), 1, m.data().to_vec());
    let mut put = |name: &str, m: &Mat| -> Result<()> {
        out.insert(format!("{name}@{}x{}", m.rows(), m.cols()), column(m)?)
    };
    let scalar = |v: f64| Mat::filled(1, 1, v);
    let row = |v: &[f64]| Mat::from_vec(1, v.len(), v.to_vec());
    put("attention.omega", &scalar(params.attention.omega))?;
    put("attention.b", &scalar(params.attention.bias))?;
    put("classifier.weight", &params.classifier.linear.weight)?;
    put("classifier.bias", &row(&params.classifier.linear.bias)?)?;
    put("decoder.embed", &params.decoder.embed)?;
    put("decoder.w_query", &params.decoder.w_query)?;
    put("decoder.out.weight", &params.decoder.out.weight)?;
    put("decoder.out.bias", &row(&params.decoder.out.bias)?)?;
    Ok(out)
}

pub fn trainable_from_checkpoint(features: &RegionFeatures) -> Result<Trainable> {
    let mut named = BTreeMap::new();
    for (key, m) in &features.images {
        let bad = || Error::Format {
            path: Default::default(),
            message: format!("checkpoint record `{key}` is not `<name>@<rows>x<cols>`"),
        };
        let (name, dims) = key.split_once('@').ok_or_else(bad)?;
        let (r, c) = dims.split_once('x').ok_or_else(bad)?;
        let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
        named.insert(name.to_owned(), Mat::from_vec(r, c, m.data().to_vec())?);
    }
    let mut take = |name: &str| {
        named
            .remove(name)
            .ok_or_else(|| Error::UnknownId(format!("checkpoint entry `{name}`")))
    };
    let omega = take("attention.omega")?.data()[0];
    let bias = take("attention.b")?.data()[0];
    Ok(Trainable {
        attention: AttentionParams { omega, bias },
        classifier: MemoryClassifier {
            linear: Linear {
                weight: take("classifier.weight")?,
                bias: take("classifier.bias")?.into_data(),
            },
        },
        decoder: ToyDecoder {
            embed: take("decoder.embed")?,
            w_query: take("decoder.w_query")?,
            out: Linear {
                weight: take("decoder.out.weight")?,
                bias: take("decoder.out.bias")?.into_data(),
            },
        },
    })
}

/// Parameters of `gdma run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdmaRunConfig {
    pub d_m: usize,
    pub heads: usize,
    pub layers: usize,
    /// Seed of the random encoder weights.
    pub seed: u64,
    pub omega: f64,
    pub b: f64,
    pub placement: GdmaPlacement,
    pub mode: AttentionMode,
}

impl Default for GdmaRunConfig {
    fn default() -> Self {
        let attention = AttentionParams::default();
        GdmaRunConfig {
            d_m: 32,
            heads: 2,
            layers: 1,
            seed: 0,
            omega: attention.omega,
            b: attention.bias,
            placement: GdmaPlacement::FinalLayer,
            mode: AttentionMode::Distinctive,
        }
    }
}

/// Attention of one group target, one entry per encoder depth used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDump {
    pub target: String,
    pub similars: Vec<String>,
    pub layers: Vec<AttentionState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdmaDump {
    pub config: GdmaRunConfig,
    pub groups: Vec<GroupDump>,
}

/// Runs the attention pipeline on every group with its first member as target.
pub fn gdma_dump(
    features: &RegionFeatures,
    groups: &[ImageGroup],
    config: &GdmaRunConfig,
) -> Result<GdmaDump> {
    let shape = EncoderShape {
        d_in: features.d,
        ..EncoderShape::new(config.d_m, config.heads, config.layers)
    };
    let encoder = EncoderParams::init(shape, config.seed)?;
    let params = AttentionParams {
        omega: config.omega,
        bias: config.b,
    };
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let feats = group
            .members()
            .map(|id| features.get(id))
            .collect::<Result<Vec<_>>>()?;
        let layers = MemoryBank::build_layers(&feats, &encoder, config.placement)?
            .iter()
            .map(|bank| bank.attend(0, params, config.mode))
            .collect::<Result<Vec<_>>>()?;
        out.push(GroupDump {
            target: group.target.clone(),
            similars: group.similars.clone(),
            layers,
        });
    }
    Ok(GdmaDump {
        config: config.clone(),
        groups: out,
    })
}
