//! Post metadata: JSONL reading/writing and numeric encoding of the `user`
//! and `post` metadata maps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{DatasetError, EmbeddingMatrix, PostRecord, Result};
use crate::modality::Modality;
use crate::util::median;

pub const DEFAULT_TOP_K: usize = 32;
pub const OTHER_CATEGORY: &str = "__other__";

/// Which metadata map of a record to encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataSide {
    User,
    Post,
}

impl MetadataSide {
    pub fn modality(self) -> Modality {
        match self {
            MetadataSide::User => Modality::User,
            MetadataSide::Post => Modality::Post,
        }
    }

    fn map(self, r: &PostRecord) -> &BTreeMap<String, Value> {
        match self {
            MetadataSide::User => &r.user_meta,
            MetadataSide::Post => &r.post_meta,
        }
    }
}

impl fmt::Display for MetadataSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetadataSide::User => "user",
            MetadataSide::Post => "post",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Categorical,
        }
    }
}

/// Ordered field lists for both metadata sides. Column order of the encoded
/// matrix follows field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSchema {
    #[serde(default)]
    pub user: Vec<FieldSpec>,
    #[serde(default)]
    pub post: Vec<FieldSpec>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl Default for MetadataSchema {
    fn default() -> Self {
        Self {
            user: Vec::new(),
            post: Vec::new(),
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl MetadataSchema {
    pub fn fields(&self, side: MetadataSide) -> &[FieldSpec] {
        match side {
            MetadataSide::User => &self.user,
            MetadataSide::Post => &self.post,
        }
    }
}

fn parse_id(obj: &Map<String, Value>, field: &str, line: usize) -> Result<String> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(DatasetError::MissingField {
            field: field.to_string(),
            line,
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(DatasetError::InvalidField {
            field: field.to_string(),
            line,
        }),
    }
}

fn parse_meta(obj: &Map<String, Value>, field: &str, line: usize) -> Result<BTreeMap<String, Value>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(BTreeMap::new()),
        Some(Value::Object(m)) => Ok(m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
        Some(_) => Err(DatasetError::InvalidField {
            field: field.to_string(),
            line,
        }),
    }
}

/// Parses JSONL post records from a reader. Blank lines are skipped; line
/// numbers in errors are 1-based physical lines.
pub fn parse_metadata(reader: impl BufRead, target_field: &str) -> Result<Vec<PostRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: "<metadata>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: line_no, source })?;
        let Value::Object(obj) = value else {
            return Err(DatasetError::InvalidField {
                field: "<line>".into(),
                line: line_no,
            });
        };
        let post_id = parse_id(&obj, "post_id", line_no)?;
        let user_id = parse_id(&obj, "user_id", line_no)?;
        let popularity = match obj.get(target_field) {
            None | Some(Value::Null) => {
                return Err(DatasetError::MissingField {
                    field: target_field.to_string(),
                    line: line_no,
                })
            }
            Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
            Some(Value::String(s)) => s.trim().parse::<f64>().map_err(|_| DatasetError::InvalidField {
                field: target_field.to_string(),
                line: line_no,
            })?,
            Some(_) => {
                return Err(DatasetError::InvalidField {
                    field: target_field.to_string(),
                    line: line_no,
                })
            }
        };
        if !popularity.is_finite() {
            return Err(DatasetError::NonFiniteTarget { line: line_no });
        }
        if !seen.insert(post_id.clone()) {
            return Err(DatasetError::DuplicatePostId { post_id, line: line_no });
        }
        records.push(PostRecord {
            post_id,
            user_id,
            popularity,
            user_meta: parse_meta(&obj, "user_meta", line_no)?,
            post_meta: parse_meta(&obj, "post_meta", line_no)?,
        });
    }
    Ok(records)
}

pub fn read_metadata(path: impl AsRef<Path>, target_field: &str) -> Result<Vec<PostRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_metadata(BufReader::new(f), target_field)
}

/// Writes records as JSONL with the target stored under `target_field`.
pub fn write_metadata(records: &[PostRecord], path: impl AsRef<Path>, target_field: &str) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        let mut obj = Map::new();
        obj.insert("post_id".into(), Value::from(r.post_id.clone()));
        obj.insert("user_id".into(), Value::from(r.user_id.clone()));
        obj.insert(target_field.into(), Value::from(r.popularity));
        obj.insert(
            "user_meta".into(),
            Value::Object(r.user_meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
        );
        obj.insert(
            "post_meta".into(),
            Value::Object(r.post_meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
        );
        serde_json::to_writer(&mut w, &Value::Object(obj)).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn category_key(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        other => Some(other.to_string()),
    }
}

fn numeric_value(v: Option<&Value>) -> std::result::Result<Option<f64>, ()> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n.as_f64().filter(|x| x.is_finite()).map(Some).ok_or(()),
        Some(Value::Bool(b)) => Ok(Some(if *b { 1.0 } else { 0.0 })),
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(Some)
            .ok_or(()),
        Some(_) => Err(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnBlock {
    Numeric { field: String, median: f64 },
    Categorical { field: String, categories: Vec<String> },
}

/// Metadata encoder fitted on a set of training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEncoder {
    side: MetadataSide,
    blocks: Vec<ColumnBlock>,
}

impl MetadataEncoder {
    pub fn fit(records: &[PostRecord], side: MetadataSide, schema: &MetadataSchema) -> Result<Self> {
        let mut blocks = Vec::new();
        for spec in schema.fields(side) {
            let present: Vec<&Value> = records
                .iter()
                .filter_map(|r| side.map(r).get(&spec.name))
                .filter(|v| !v.is_null())
                .collect();
            if present.is_empty() {
                return Err(DatasetError::UnknownField {
                    field: spec.name.clone(),
                    side,
                });
            }
            match spec.kind {
                FieldKind::Numeric => {
                    let mut values = Vec::with_capacity(present.len());
                    for r in records {
                        match numeric_value(side.map(r).get(&spec.name)) {
                            Ok(Some(x)) => values.push(x),
                            Ok(None) => {}
                            Err(()) => {
                                return Err(DatasetError::NonNumericValue {
                                    field: spec.name.clone(),
                                    side,
                                    post_id: r.post_id.clone(),
                                })
                            }
                        }
                    }
                    blocks.push(ColumnBlock::Numeric {
                        field: spec.name.clone(),
                        median: median(&values).unwrap_or(0.0),
                    });
                }
                FieldKind::Categorical => {
                    let mut counts: HashMap<String, usize> = HashMap::new();
                    for v in present {
                        if let Some(k) = category_key(v) {
                            *counts.entry(k).or_default() += 1;
                        }
                    }
                    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                    ranked.truncate(schema.top_k);
                    blocks.push(ColumnBlock::Categorical {
                        field: spec.name.clone(),
                        categories: ranked.into_iter().map(|(k, _)| k).collect(),
                    });
                }
            }
        }
        Ok(Self { side, blocks })
    }

    pub fn side(&self) -> MetadataSide {
        self.side
    }

    pub fn n_cols(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                ColumnBlock::Numeric { .. } => 1,
                ColumnBlock::Categorical { categories, .. } => categories.len() + 1,
            })
            .sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_cols());
        for b in &self.blocks {
            match b {
                ColumnBlock::Numeric { field, .. } => names.push(field.clone()),
                ColumnBlock::Categorical { field, categories } => {
                    names.extend(categories.iter().map(|c| format!("{field}={c}")));
                    names.push(format!("{field}={OTHER_CATEGORY}"));
                }
            }
        }
        names
    }

    /// Encodes records. Missing numerics take the fitted median; unseen or
    /// missing categories go to the `other` column.
    pub fn transform(&self, records: &[PostRecord]) -> Result<EmbeddingMatrix> {
        let n_cols = self.n_cols();
        let mut data = Vec::with_capacity(records.len() * n_cols);
        for r in records {
            let meta = self.side.map(r);
            for b in &self.blocks {
                match b {
                    ColumnBlock::Numeric { field, median } => {
                        let v = numeric_value(meta.get(field)).map_err(|()| DatasetError::NonNumericValue {
                            field: field.clone(),
                            side: self.side,
                            post_id: r.post_id.clone(),
                        })?;
                        data.push(v.unwrap_or(*median));
                    }
                    ColumnBlock::Categorical { field, categories } => {
                        let key = meta.get(field).and_then(category_key);
                        let hit = key.and_then(|k| categories.iter().position(|c| *c == k));
                        for i in 0..categories.len() {
                            data.push(if hit == Some(i) { 1.0 } else { 0.0 });
                        }
                        data.push(if hit.is_none() { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        EmbeddingMatrix::new(self.side.modality(), records.len(), n_cols, data)
    }
}

/// Fits an encoder on `records` and encodes them.
pub fn encode_metadata(records: &[PostRecord], side: MetadataSide, schema: &MetadataSchema) -> Result<EmbeddingMatrix> {
    MetadataEncoder::fit(records, side, schema)?.transform(records)
}
