//! Named row-major feature blocks and their horizontal concatenation into the
//! final design matrix.

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub n_rows: usize,
    pub column_names: Vec<String>,
    pub data: Vec<f64>,
}

impl FeatureBlock {
    pub fn new(n_rows: usize, column_names: Vec<String>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * column_names.len(), "feature block shape");
        Self {
            n_rows,
            column_names,
            data,
        }
    }

    pub fn empty(n_rows: usize) -> Self {
        Self::new(n_rows, Vec::new(), Vec::new())
    }

    /// Wraps a matrix, naming columns `<prefix>_<j>`.
    pub fn from_matrix(m: &EmbeddingMatrix, prefix: &str) -> Self {
        let names = (0..m.n_cols()).map(|j| format!("{prefix}_{j}")).collect();
        Self::new(m.n_rows(), names, m.data().to_vec())
    }

    pub fn width(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    /// Horizontal concatenation. All blocks must have the same row count.
    pub fn hstack(blocks: &[FeatureBlock]) -> Self {
        let n = blocks.first().map_or(0, |b| b.n_rows);
        assert!(blocks.iter().all(|b| b.n_rows == n), "hstack: row counts differ");
        let names: Vec<String> = blocks.iter().flat_map(|b| b.column_names.iter().cloned()).collect();
        let mut data = Vec::with_capacity(n * names.len());
        for i in 0..n {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Self::new(n, names, data)
    }
}
