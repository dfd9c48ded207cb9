use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metadata::{read_metadata, MetadataEncoder, MetadataSchema, MetadataSide};
use super::{amcf, Dataset, DatasetError, Result};
use crate::modality::Modality;

fn default_target() -> String {
    "popularity".to_string()
}

/// Describes where a dataset lives. Relative paths are resolved against
/// `base_dir`, which [`Manifest::from_path`] sets to the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata_path: PathBuf,
    #[serde(default = "default_target")]
    pub target_field: String,
    #[serde(default)]
    pub modalities: BTreeMap<Modality, PathBuf>,
    #[serde(default)]
    pub metadata_schema: MetadataSchema,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Loads records and matrices, synthesizing `user`/`post` matrices from
/// metadata when the schema lists fields for them and no file is given.
pub fn load_dataset(manifest: &Manifest) -> Result<Dataset> {
    let records = read_metadata(manifest.resolve(&manifest.metadata_path), &manifest.target_field)?;
    let mut matrices = BTreeMap::new();
    for (&modality, path) in &manifest.modalities {
        let m = amcf::read_embedding_matrix(manifest.resolve(path), modality)?;
        if m.n_rows() != records.len() {
            return Err(DatasetError::RowCountMismatch {
                modality,
                expected: records.len(),
                actual: m.n_rows(),
            });
        }
        matrices.insert(modality, m);
    }
    for side in [MetadataSide::User, MetadataSide::Post] {
        let modality = side.modality();
        if matrices.contains_key(&modality) || manifest.metadata_schema.fields(side).is_empty() {
            continue;
        }
        let enc = MetadataEncoder::fit(&records, side, &manifest.metadata_schema)?;
        if enc.n_cols() > 0 {
            matrices.insert(modality, enc.transform(&records)?);
        }
    }
    Dataset::new(records, matrices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::metadata::{encode_metadata, write_metadata, FieldSpec};
    use crate::dataset::{EmbeddingMatrix, PostRecord};
    use serde_json::json;

    fn records(n: usize) -> Vec<PostRecord> {
        (0..n)
            .map(|i| PostRecord {
                post_id: format!("p{i}"),
                user_id: format!("u{}", i % 3),
                popularity: i as f64,
                user_meta: BTreeMap::from([("followers".to_string(), json!(i * 10))]),
                post_meta: BTreeMap::new(),
            })
            .collect()
    }

    fn fixture(dir: &Path, n_rows_text: usize) -> Manifest {
        let recs = records(10);
        write_metadata(&recs, dir.join("meta.jsonl"), "popularity").unwrap();
        let text = EmbeddingMatrix::new(
            Modality::Text,
            n_rows_text,
            4,
            (0..n_rows_text * 4).map(|v| v as f64).collect(),
        )
        .unwrap();
        amcf::write_embedding_matrix(&text, dir.join("text.amcf")).unwrap();
        let m = Manifest {
            metadata_path: "meta.jsonl".into(),
            target_field: "popularity".into(),
            modalities: BTreeMap::from([(Modality::Text, PathBuf::from("text.amcf"))]),
            metadata_schema: MetadataSchema {
                user: vec![FieldSpec::numeric("followers")],
                ..Default::default()
            },
            base_dir: PathBuf::new(),
        };
        m.write(dir.join("manifest.json")).unwrap();
        Manifest::from_path(dir.join("manifest.json")).unwrap()
    }

    #[test]
    fn loads_aligned_dataset_and_synthesizes_user() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 10);
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.modalities(), vec![Modality::Text, Modality::User]);
        let expected = encode_metadata(ds.records(), MetadataSide::User, &m.metadata_schema).unwrap();
        assert_eq!(ds.matrix(Modality::User).unwrap(), &expected);
    }

    #[test]
    fn row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 9);
        assert!(matches!(
            load_dataset(&m),
            Err(DatasetError::RowCountMismatch {
                modality: Modality::Text,
                expected: 10,
                actual: 9
            })
        ));
    }

    #[test]
    fn manifest_json_keys() {
        let src = r#"{"metadata_path":"m.jsonl","target_field":"pop","modalities":{"video":"v.amcf"},
                      "metadata_schema":{"user":[{"name":"f","kind":"numeric"}]}}"#;
        let m: Manifest = serde_json::from_str(src).unwrap();
        assert_eq!(m.modalities[&Modality::Video], PathBuf::from("v.amcf"));
        assert_eq!(m.metadata_schema.top_k, 32);
    }
}
