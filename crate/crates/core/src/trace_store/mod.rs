//! Binary trace files holding per-layer last-input-token hidden states and
//! per-step output logits, plus the unembedding matrix they are read through.
//!
//! Layout of a `.vlt` file (all integers and floats little-endian):
//!
//! ```text
//! "VLTRACE1"                     8-byte magic
//! u32 header_len, header JSON    TraceHeader
//! per record:
//!   u32 id_len, id bytes (UTF-8)
//!   L x d f32                    hidden states, layer 1 first
//!   u32 T
//!   T x |V| f32                  logits for each generated step
//!   T x u32                      generated token ids
//!   u8 has_label, u8 label
//! u32 CRC32 of every preceding byte
//! ```

mod codec;
mod validate;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{
    decode_trace, decode_unembedding, encode_trace, encode_unembedding, read_trace, read_unembedding, write_trace,
    write_unembedding, TRACE_MAGIC, UNEMBEDDING_MAGIC,
};
pub use validate::{validate_trace, ValidationReport, Violation};

/// Current on-disk format version for both trace and unembedding files.
pub const FORMAT_VERSION: u32 = 1;

/// Evaluation setting a trace was recorded under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Trivial image plus the question that names the entity.
    TextOnly,
    /// Entity image plus the question that only refers to the image.
    Visual,
    /// Entity image plus the question that names the entity.
    FullInfo,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Setting::TextOnly => "TextOnly",
            Setting::Visual => "Visual",
            Setting::FullInfo => "FullInfo",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model_id: String,
    pub setting: Setting,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_records: usize,
    pub endianness: Endianness,
}

impl TraceHeader {
    pub fn new(
        model_id: impl Into<String>,
        setting: Setting,
        num_layers: usize,
        hidden_dim: usize,
        vocab_size: usize,
        num_records: usize,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            setting,
            num_layers,
            hidden_dim,
            vocab_size,
            num_records,
            endianness: Endianness::Little,
        }
    }
}

/// One datapoint: hidden states of the last input token at every layer and
/// the logits of every generated answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub datapoint_id: String,
    /// `num_layers` vectors of `hidden_dim` values; index 0 is layer 1.
    pub hidden_states: Vec<Vec<f32>>,
    /// One `vocab_size` vector per generated token.
    pub output_logits: Vec<Vec<f32>>,
    pub generated_token_ids: Vec<u32>,
    /// `Some(true)` when the model linked the entity and answered correctly,
    /// `Some(false)` on linking failure, `None` when not yet graded.
    pub correct: Option<bool>,
}

impl TraceRecord {
    /// Hidden state after layer `layer`, counting from 1.
    pub fn layer(&self, layer: usize) -> Option<&[f32]> {
        layer
            .checked_sub(1)
            .and_then(|i| self.hidden_states.get(i))
            .map(Vec::as_slice)
    }

    pub fn first_generated(&self) -> Option<u32> {
        self.generated_token_ids.first().copied()
    }

    /// Linking failure is the positive class for every detector.
    pub fn is_failure(&self) -> Option<bool> {
        self.correct.map(|c| !c)
    }
}

/// A loaded trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceSet {
    pub fn new(header: TraceHeader, records: Vec<TraceRecord>) -> Self {
        Self { header, records }
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self, TraceError> {
        let (header, records) = read_trace(path)?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<(), TraceError> {
        write_trace(&self.header, &self.records, path)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_trace(&self.header, &self.records)
    }
}

/// `|V| x d` map from hidden space to vocabulary logits, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding {
    pub model_id: String,
    vocab_size: usize,
    hidden_dim: usize,
    data: Vec<f32>,
}

impl Unembedding {
    pub fn new(
        model_id: impl Into<String>,
        vocab_size: usize,
        hidden_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, TraceError> {
        if vocab_size == 0 || hidden_dim == 0 {
            return Err(TraceError::Header("unembedding dimensions must be positive".into()));
        }
        let expected = vocab_size
            .checked_mul(hidden_dim)
            .ok_or_else(|| TraceError::Header("unembedding dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(TraceError::Header(format!(
                "unembedding has {} values, expected {vocab_size} x {hidden_dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::Header(format!(
                "unembedding entry ({}, {}) is not finite",
                pos / hidden_dim,
                pos % hidden_dim
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            vocab_size,
            hidden_dim,
            data,
        })
    }

    /// Builds from rows; every row must have the same length.
    pub fn from_rows(model_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self, TraceError> {
        let hidden_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != hidden_dim) {
            return Err(TraceError::Header("unembedding rows differ in length".into()));
        }
        Self::new(model_id, rows.len(), hidden_dim, rows.concat())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.data[token * self.hidden_dim..(token + 1) * self.hidden_dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// `U h` accumulated in f64.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        debug_assert_eq!(h.len(), self.hidden_dim);
        self.data
            .chunks_exact(self.hidden_dim)
            .map(|row| row.iter().zip(h).map(|(&u, &x)| u as f64 * x).sum())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("record {index} ({datapoint_id}): {detail}")]
    Dimension {
        index: usize,
        datapoint_id: String,
        detail: String,
    },
    #[error("header declares {declared} records but {actual} were supplied")]
    RecordCount { declared: usize, actual: usize },
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("corrupt trace at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum PairingError {
    #[error("model mismatch: {0} vs {1}")]
    Model(String, String),
    #[error("shape mismatch: {field} is {left} vs {right}")]
    Shape {
        field: &'static str,
        left: usize,
        right: usize,
    },
    #[error("datapoint {0} present in only one trace")]
    Unmatched(String),
    #[error("duplicate datapoint id {0}")]
    Duplicate(String),
}

/// Pairs Visual and FullInfo records by datapoint id. Both traces must come
/// from the same model with the same shapes and the same id set; the result
/// follows the order of `left`.
pub fn pair_traces(left: &TraceSet, right: &TraceSet) -> Result<Vec<(usize, usize)>, PairingError> {
    let (a, b) = (&left.header, &right.header);
    if a.model_id != b.model_id {
        return Err(PairingError::Model(a.model_id.clone(), b.model_id.clone()));
    }
    for (field, l, r) in [
        ("num_layers", a.num_layers, b.num_layers),
        ("hidden_dim", a.hidden_dim, b.hidden_dim),
        ("vocab_size", a.vocab_size, b.vocab_size),
    ] {
        if l != r {
            return Err(PairingError::Shape {
                field,
                left: l,
                right: r,
            });
        }
    }

    let mut index: HashMap<&str, usize> = HashMap::with_capacity(right.records.len());
    for (i, rec) in right.records.iter().enumerate() {
        if index.insert(rec.datapoint_id.as_str(), i).is_some() {
            return Err(PairingError::Duplicate(rec.datapoint_id.clone()));
        }
    }
    let mut seen = HashSet::with_capacity(left.records.len());
    let mut pairs = Vec::with_capacity(left.records.len());
    for (i, rec) in left.records.iter().enumerate() {
        if !seen.insert(rec.datapoint_id.as_str()) {
            return Err(PairingError::Duplicate(rec.datapoint_id.clone()));
        }
        match index.get(rec.datapoint_id.as_str()) {
            Some(&j) => pairs.push((i, j)),
            None => return Err(PairingError::Unmatched(rec.datapoint_id.clone())),
        }
    }
    if let Some(extra) = right.records.iter().find(|r| !seen.contains(r.datapoint_id.as_str())) {
        return Err(PairingError::Unmatched(extra.datapoint_id.clone()));
    }
    Ok(pairs)
}
