//! Aligned multi-modal datasets and their on-disk formats.
//!
//! * [`amcf`] is the little-endian binary matrix format every embedding
//!   producer emits.
//! * [`metadata`] reads post records from JSONL and encodes structured
//!   metadata into numeric matrices.
//! * [`manifest`] ties a metadata file and per-modality matrices together.

pub mod amcf;
pub mod manifest;
pub mod metadata;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::modality::Modality;

pub use amcf::{read_embedding_matrix, write_embedding_matrix};
pub use manifest::{load_dataset, Manifest};
pub use metadata::{encode_metadata, read_metadata, write_metadata, MetadataEncoder, MetadataSchema, MetadataSide};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset 0: expected \"AMCF\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at offset 4")]
    UnsupportedVersion { version: u8 },
    #[error("unsupported dtype code {dtype} at offset 5")]
    UnsupportedDtype { dtype: u8 },
    #[error("truncated file: expected {expected} bytes, found {actual} (data ends at offset {actual})")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("non-finite value at offset {offset} (row {row}, col {col})")]
    NonFiniteValue { offset: u64, row: usize, col: usize },
    #[error("matrix has zero rows or columns ({n_rows}x{n_cols})")]
    EmptyMatrix { n_rows: usize, n_cols: usize },
    #[error("matrix data length {len} does not match shape {n_rows}x{n_cols}")]
    ShapeMismatch { n_rows: usize, n_cols: usize, len: usize },
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { field: String, line: usize },
    #[error("line {line}: field `{field}` has the wrong type")]
    InvalidField { field: String, line: usize },
    #[error("line {line}: duplicate post_id `{post_id}`")]
    DuplicatePostId { post_id: String, line: usize },
    #[error("line {line}: target value is not finite")]
    NonFiniteTarget { line: usize },
    #[error("schema field `{field}` does not appear in any {side} metadata")]
    UnknownField { field: String, side: MetadataSide },
    #[error("{side} metadata field `{field}` of post `{post_id}` is not numeric")]
    NonNumericValue {
        field: String,
        side: MetadataSide,
        post_id: String,
    },
    #[error("modality {modality}: expected {expected} rows, found {actual}")]
    RowCountMismatch {
        modality: Modality,
        expected: usize,
        actual: usize,
    },
    #[error("dataset has no modalities")]
    NoModalities,
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One post: identifiers, target, and raw metadata maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub post_id: String,
    pub user_id: String,
    /// Popularity target, already on whatever scale the producer chose.
    pub popularity: f64,
    #[serde(default)]
    pub user_meta: BTreeMap<String, Value>,
    #[serde(default)]
    pub post_meta: BTreeMap<String, Value>,
}

impl PostRecord {
    /// Concatenates the string-valued `post_meta` entries named in `fields`,
    /// in the given order, separated by `" | "`.
    pub fn text_fields(&self, fields: &[String]) -> String {
        let parts: Vec<&str> = fields
            .iter()
            .filter_map(|f| self.post_meta.get(f).and_then(Value::as_str))
            .filter(|s| !s.trim().is_empty())
            .collect();
        parts.join(" | ")
    }
}

/// Dense row-major `n_rows x n_cols` real matrix for one modality.
///
/// Values are held as `f64` in memory and stored as `f32` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub modality: Modality,
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(modality: Modality, n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(DatasetError::ShapeMismatch {
                n_rows,
                n_cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteValue {
                offset: (amcf::HEADER_LEN + pos * 4) as u64,
                row: pos / n_cols.max(1),
                col: pos % n_cols.max(1),
            });
        }
        Ok(Self {
            modality,
            n_rows,
            n_cols,
            data,
        })
    }

    /// Builds a matrix from equal-length rows. `n_cols` is taken from the
    /// first row (0 when `rows` is empty).
    pub fn from_rows(modality: Modality, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(DatasetError::ShapeMismatch {
                    n_rows: rows.len(),
                    n_cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(modality, rows.len(), n_cols, data)
    }

    pub fn zeros(modality: Modality, n_rows: usize, n_cols: usize) -> Self {
        Self {
            modality,
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    /// Matrix of the selected rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            modality: self.modality,
            n_rows: rows.len(),
            n_cols: self.n_cols,
            data,
        }
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

/// Post records plus one row-aligned matrix per available modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<PostRecord>,
    matrices: BTreeMap<Modality, EmbeddingMatrix>,
}

impl Dataset {
    pub fn new(records: Vec<PostRecord>, matrices: BTreeMap<Modality, EmbeddingMatrix>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(DatasetError::NoModalities);
        }
        let mut seen = std::collections::HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.post_id.as_str()) {
                return Err(DatasetError::DuplicatePostId {
                    post_id: r.post_id.clone(),
                    line: i + 1,
                });
            }
            if !r.popularity.is_finite() {
                return Err(DatasetError::NonFiniteTarget { line: i + 1 });
            }
        }
        for (&modality, m) in &matrices {
            if m.n_rows() != records.len() {
                return Err(DatasetError::RowCountMismatch {
                    modality,
                    expected: records.len(),
                    actual: m.n_rows(),
                });
            }
        }
        let matrices = matrices.into_iter().map(|(k, m)| (k, m.with_modality(k))).collect();
        Ok(Self { records, matrices })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PostRecord] {
        &self.records
    }

    pub fn matrix(&self, modality: Modality) -> Option<&EmbeddingMatrix> {
        self.matrices.get(&modality)
    }

    pub fn matrices(&self) -> &BTreeMap<Modality, EmbeddingMatrix> {
        &self.matrices
    }

    /// Present modalities in canonical order.
    pub fn modalities(&self) -> Vec<Modality> {
        self.matrices.keys().copied().collect()
    }

    pub fn popularity(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.popularity).collect()
    }

    pub fn user_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.user_id.as_str()).collect()
    }

    /// Dataset restricted to `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            matrices: self.matrices.iter().map(|(&k, m)| (k, m.select_rows(rows))).collect(),
        }
    }

    /// Row-wise concatenation. All parts must carry the same modalities with
    /// matching widths, and post ids must stay unique.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(DatasetError::NoModalities)?;
        let mut records = Vec::new();
        let mut data: BTreeMap<Modality, (usize, Vec<f64>)> = first
            .matrices
            .iter()
            .map(|(&k, m)| (k, (m.n_cols(), Vec::new())))
            .collect();
        for p in parts {
            if p.modalities() != first.modalities() {
                return Err(DatasetError::Manifest("datasets carry different modalities".into()));
            }
            records.extend(p.records.iter().cloned());
            for (k, m) in &p.matrices {
                let (cols, buf) = data.get_mut(k).expect("same modalities");
                if m.n_cols() != *cols {
                    return Err(DatasetError::ShapeMismatch {
                        n_rows: m.n_rows(),
                        n_cols: *cols,
                        len: m.data().len(),
                    });
                }
                buf.extend_from_slice(m.data());
            }
        }
        let n = records.len();
        let matrices = data
            .into_iter()
            .map(|(k, (cols, buf))| EmbeddingMatrix::new(k, n, cols, buf).map(|m| (k, m)))
            .collect::<Result<_>>()?;
        Self::new(records, matrices)
    }

    /// Copy with replaced popularity values; alignment is unchanged.
    pub fn with_popularity(&self, popularity: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        for (i, (r, &y)) in out.records.iter_mut().zip(popularity).enumerate() {
            if !y.is_finite() {
                return Err(DatasetError::NonFiniteTarget { line: i + 1 });
            }
            r.popularity = y;
        }
        Ok(out)
    }
}
