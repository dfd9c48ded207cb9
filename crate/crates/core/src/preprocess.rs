//! Fitted per-modality preprocessing: column standardization for metadata
//! modalities and centered truncated SVD for text embeddings.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::{amcf, DatasetError, EmbeddingMatrix};
use crate::modality::Modality;

pub const DEFAULT_SVD_RANK: usize = 128;
const MIN_STD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("cannot fit on an empty matrix")]
    Empty,
    #[error("dimension mismatch: fitted on {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("rank must be at least 1")]
    InvalidRank,
    #[error("matrix too small: need at least {min_rows} rows, got {rows}")]
    TooSmall { min_rows: usize, rows: usize },
    #[error("SVD did not converge")]
    NoConvergence,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model file: {0}")]
    Model(String),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Column-wise population mean/std. Columns whose std is below `1e-12`
/// record a std of 1, so they map to zero after centering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fitted_dim(&self) -> usize {
        self.means.len()
    }
}

pub fn fit_standardizer(matrix: &EmbeddingMatrix) -> Result<Standardizer> {
    let (n, d) = (matrix.n_rows(), matrix.n_cols());
    if n == 0 {
        return Err(PreprocessError::Empty);
    }
    let mut means = vec![0.0; d];
    for row in matrix.rows() {
        for (m, &x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; d];
    for row in matrix.rows() {
        for ((v, &x), &m) in vars.iter_mut().zip(row).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    let stds = vars
        .into_iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s < MIN_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(Standardizer { means, stds })
}

pub fn apply_standardizer(s: &Standardizer, matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if matrix.n_cols() != s.fitted_dim() {
        return Err(PreprocessError::DimensionMismatch {
            expected: s.fitted_dim(),
            actual: matrix.n_cols(),
        });
    }
    let mut data = Vec::with_capacity(matrix.data().len());
    for row in matrix.rows() {
        data.extend(
            row.iter()
                .zip(&s.means)
                .zip(&s.stds)
                .map(|((&x, &m), &sd)| (x - m) / sd),
        );
    }
    Ok(EmbeddingMatrix::new(
        matrix.modality,
        matrix.n_rows(),
        matrix.n_cols(),
        data,
    )?)
}

/// Top singular directions of the (optionally centered) training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdModel {
    /// `rank` rows of length `input_dim`: right singular vectors.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
    /// All zeros when fitted without centering.
    pub column_means: Vec<f64>,
    pub seed: u64,
}

impl SvdModel {
    pub fn rank(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.column_means.len()
    }

    /// Writes `<stem>.json` (everything but the components) and
    /// `<stem>.components.amcf`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let meta = serde_json::json!({
            "rank": self.rank(),
            "input_dim": self.input_dim(),
            "singular_values": self.singular_values,
            "column_means": self.column_means,
            "seed": self.seed,
            "components_file": format!("{stem}.components.amcf"),
        });
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&meta).expect("json")).map_err(|source| {
            DatasetError::Io {
                path: json_path,
                source,
            }
        })?;
        let rows: Vec<Vec<f64>> = self.components.clone();
        let m = EmbeddingMatrix::from_rows(Modality::Text, &rows)?;
        amcf::write_embedding_matrix(&m, dir.join(format!("{stem}.components.amcf")))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|source| DatasetError::Io {
            path: json_path,
            source,
        })?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| PreprocessError::Model(e.to_string()))?;
        let vec_of = |key: &str| -> Result<Vec<f64>> {
            serde_json::from_value(meta[key].clone()).map_err(|e| PreprocessError::Model(format!("{key}: {e}")))
        };
        let comps = amcf::read_embedding_matrix(dir.join(format!("{stem}.components.amcf")), Modality::Text)?;
        Ok(Self {
            components: comps.rows().map(<[f64]>::to_vec).collect(),
            singular_values: vec_of("singular_values")?,
            column_means: vec_of("column_means")?,
            seed: meta["seed"].as_u64().unwrap_or(0),
        })
    }
}

/// Centered truncated SVD. The decomposition is exact, so `seed` only
/// travels with the model for provenance.
pub fn fit_truncated_svd(matrix: &EmbeddingMatrix, rank: usize, seed: u64) -> Result<SvdModel> {
    fit_truncated_svd_with(matrix, rank, seed, true)
}

pub fn fit_truncated_svd_with(matrix: &EmbeddingMatrix, rank: usize, seed: u64, center: bool) -> Result<SvdModel> {
    if rank == 0 {
        return Err(PreprocessError::InvalidRank);
    }
    let (n, d) = (matrix.n_rows(), matrix.n_cols());
    if n < 2 || d == 0 {
        return Err(PreprocessError::TooSmall { min_rows: 2, rows: n });
    }
    let cap = n.min(d);
    let eff = if rank > cap {
        warn!(
            requested = rank,
            effective = cap,
            "SVD rank capped at min(n_rows, n_cols)"
        );
        cap
    } else {
        rank
    };

    let mut means = vec![0.0; d];
    if center {
        for row in matrix.rows() {
            for (m, &x) in means.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| matrix.get(i, j) - means[j]);
    let svd = centered
        .try_svd(false, true, f64::EPSILON, 10_000)
        .ok_or(PreprocessError::NoConvergence)?;
    let v_t = svd.v_t.as_ref().ok_or(PreprocessError::NoConvergence)?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(eff);
    let mut singular_values = Vec::with_capacity(eff);
    for &idx in order.iter().take(eff) {
        let mut c: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // deterministic sign: largest-magnitude entry positive
        let pivot = c.iter().enumerate().fold(
            (0, 0.0f64),
            |acc, (j, &v)| {
                if v.abs() > acc.1.abs() {
                    (j, v)
                } else {
                    acc
                }
            },
        );
        if pivot.1 < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        singular_values.push(svd.singular_values[idx]);
    }
    Ok(SvdModel {
        components,
        singular_values,
        column_means: means,
        seed,
    })
}

pub fn apply_svd(model: &SvdModel, matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if matrix.n_cols() != model.input_dim() {
        return Err(PreprocessError::DimensionMismatch {
            expected: model.input_dim(),
            actual: matrix.n_cols(),
        });
    }
    let rank = model.rank();
    let mut data = Vec::with_capacity(matrix.n_rows() * rank);
    let mut centered = vec![0.0; matrix.n_cols()];
    for row in matrix.rows() {
        for ((c, &x), &m) in centered.iter_mut().zip(row).zip(&model.column_means) {
            *c = x - m;
        }
        data.extend(
            model
                .components
                .iter()
                .map(|comp| comp.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>()),
        );
    }
    Ok(EmbeddingMatrix::new(matrix.modality, matrix.n_rows(), rank, data)?)
}

/// A fitted preprocessing step for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Preprocessor {
    Identity,
    Standardize(Standardizer),
    Svd(SvdModel),
}

impl Preprocessor {
    /// Fits the default step for a modality: SVD for text, standardization
    /// for metadata, nothing for video/audio.
    pub fn fit_for(modality: Modality, matrix: &EmbeddingMatrix, svd_rank: usize, seed: u64) -> Result<Self> {
        Ok(match modality {
            Modality::Text => Preprocessor::Svd(fit_truncated_svd(matrix, svd_rank, seed)?),
            Modality::User | Modality::Post => Preprocessor::Standardize(fit_standardizer(matrix)?),
            Modality::Video | Modality::Audio => Preprocessor::Identity,
        })
    }

    pub fn apply(&self, matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        match self {
            Preprocessor::Identity => Ok(matrix.clone()),
            Preprocessor::Standardize(s) => apply_standardizer(s, matrix),
            Preprocessor::Svd(m) => apply_svd(m, matrix),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Modality::User, values.len(), 1, values.to_vec()).unwrap()
    }

    fn mat(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(Modality::Text, rows).unwrap()
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let s = fit_standardizer(&col(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(s.means, vec![5.0]);
        assert_eq!(s.stds, vec![1.0]);
        let out = apply_standardizer(&s, &col(&[5.0, 5.0, 5.0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn population_std_of_one_two_three() {
        // independent reference: mean 2, var ((1)^2 + 0 + (1)^2) / 3 = 2/3
        let ref_std = (2.0f64 / 3.0).sqrt();
        let s = fit_standardizer(&col(&[1.0, 2.0, 3.0])).unwrap();
        assert!((s.means[0] - 2.0).abs() < 1e-15);
        assert!((s.stds[0] - ref_std).abs() < 1e-15);
        assert!((s.stds[0] - 0.81650).abs() < 1e-5);
        let out = apply_standardizer(&s, &col(&[1.0, 2.0, 3.0])).unwrap();
        for (got, want) in out.data().iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn refit_on_standardized_output_is_identity() {
        let m = mat(&[vec![1.0, 10.0], vec![4.0, -3.0], vec![2.5, 7.0], vec![0.0, 0.5]]);
        let s = fit_standardizer(&m).unwrap();
        let z = apply_standardizer(&s, &m).unwrap();
        let s2 = fit_standardizer(&z).unwrap();
        let z2 = apply_standardizer(&s2, &z).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for j in 0..2 {
            let mean: f64 = z.rows().map(|r| r[j]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn apply_to_new_row_matches_hand_formula() {
        let m = mat(&[vec![0.0, 2.0], vec![4.0, 2.0]]);
        let s = fit_standardizer(&m).unwrap();
        // means [2, 2], stds [2, 1 (constant)]
        let out = apply_standardizer(&s, &mat(&[vec![5.0, 3.0]])).unwrap();
        assert_eq!(out.data(), &[1.5, 1.0]);
    }

    #[test]
    fn standardizer_dimension_mismatch() {
        let s = fit_standardizer(&col(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            apply_standardizer(&s, &mat(&[vec![1.0, 2.0]])),
            Err(PreprocessError::DimensionMismatch { expected: 1, actual: 2 })
        ));
        assert!(matches!(
            fit_standardizer(&EmbeddingMatrix::zeros(Modality::User, 0, 2)),
            Err(PreprocessError::Empty)
        ));
    }

    #[test]
    fn diagonal_singular_values_without_centering() {
        let m = mat(&[vec![3.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let svd = fit_truncated_svd_with(&m, 3, 0, false).unwrap();
        for (got, want) in svd.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_is_capped() {
        let m = mat(&[
            vec![1.0, 2.0, 0.0],
            vec![0.0, 1.0, 5.0],
            vec![3.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0],
        ]);
        let svd = fit_truncated_svd(&m, 10, 0).unwrap();
        assert_eq!(svd.rank(), 3);
        assert!(matches!(fit_truncated_svd(&m, 0, 0), Err(PreprocessError::InvalidRank)));
        assert!(matches!(
            fit_truncated_svd(&mat(&[vec![1.0, 2.0]]), 1, 0),
            Err(PreprocessError::TooSmall { .. })
        ));
    }

    #[test]
    fn mean_row_projects_to_zero() {
        let m = mat(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 4.0]]);
        let svd = fit_truncated_svd(&m, 2, 0).unwrap();
        let means = svd.column_means.clone();
        let out = apply_svd(&svd, &mat(&[means])).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(
            apply_svd(&svd, &mat(&[vec![1.0]])),
            Err(PreprocessError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let m = mat(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 4.0]]);
        let svd = fit_truncated_svd(&m, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        svd.save(dir.path(), "text_svd").unwrap();
        let back = SvdModel::load(dir.path(), "text_svd").unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.singular_values, svd.singular_values);
        for (a, b) in back.components.iter().flatten().zip(svd.components.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
