//! Statistical anchors: per-cluster popularity statistics fitted on training
//! rows and looked up for any row by its cluster label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::LabelVector;
use crate::fusion::FeatureBlock;
use crate::modality::Modality;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnchorError {
    #[error("cannot fit anchor statistics on an empty training set")]
    EmptyTraining,
    #[error("{labels} labels but {targets} popularity values")]
    LengthMismatch { labels: usize, targets: usize },
    #[error("label {label} out of range for k = {k} ({modality})")]
    LabelOutOfRange { modality: Modality, label: usize, k: usize },
    #[error("no anchor statistics for modality {0}")]
    MissingModality(Modality),
    #[error("label vectors have unequal lengths")]
    Misaligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub mean: f64,
    /// Population variance (1/N).
    pub var: f64,
    pub count: usize,
}

/// Popularity statistics of every cluster of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorStats {
    pub modality: Modality,
    /// Indexed by cluster; unpopulated clusters hold the global fallback with
    /// count 0.
    pub clusters: Vec<ClusterStat>,
    pub global_mean: f64,
    pub global_var: f64,
    pub n_train: usize,
}

impl AnchorStats {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn get(&self, label: usize) -> Option<&ClusterStat> {
        self.clusters.get(label)
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Per-cluster mean, population variance, and count of the training
/// popularity values.
pub fn fit_anchor_stats(labels: &LabelVector, popularity: &[f64], k: usize) -> Result<AnchorStats, AnchorError> {
    fit_anchor_stats_with(labels, popularity, k, None)
}

/// As [`fit_anchor_stats`], optionally shrinking each populated cluster mean
/// toward the global mean: `(N·mean + α·global) / (N + α)`.
pub fn fit_anchor_stats_with(
    labels: &LabelVector,
    popularity: &[f64],
    k: usize,
    shrinkage: Option<f64>,
) -> Result<AnchorStats, AnchorError> {
    if labels.len() != popularity.len() {
        return Err(AnchorError::LengthMismatch {
            labels: labels.len(),
            targets: popularity.len(),
        });
    }
    if popularity.is_empty() {
        return Err(AnchorError::EmptyTraining);
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&l, &y) in labels.labels.iter().zip(popularity) {
        groups
            .get_mut(l)
            .ok_or(AnchorError::LabelOutOfRange {
                modality: labels.modality,
                label: l,
                k,
            })?
            .push(y);
    }
    let (global_mean, global_var) = mean_var(popularity);
    let clusters = groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                return ClusterStat {
                    mean: global_mean,
                    var: global_var,
                    count: 0,
                };
            }
            let (mut mean, var) = mean_var(g);
            let count = g.len();
            if let Some(alpha) = shrinkage {
                mean = (count as f64 * mean + alpha * global_mean) / (count as f64 + alpha);
            }
            ClusterStat { mean, var, count }
        })
        .collect();
    Ok(AnchorStats {
        modality: labels.modality,
        clusters,
        global_mean,
        global_var,
        n_train: popularity.len(),
    })
}

/// Row-major `n x 4M` block: for each modality in canonical order,
/// `[mean, var, count, cluster_label]`.
pub type StatFeatureBlock = FeatureBlock;

pub fn stat_column_names(modality: Modality) -> [String; 4] {
    [
        format!("{modality}_stat_mean"),
        format!("{modality}_stat_var"),
        format!("{modality}_stat_count"),
        format!("{modality}_cluster"),
    ]
}

pub fn lookup_stat_features(
    labels_by_modality: &BTreeMap<Modality, LabelVector>,
    stats_by_modality: &BTreeMap<Modality, AnchorStats>,
) -> Result<StatFeatureBlock, AnchorError> {
    let n = labels_by_modality.values().next().map_or(0, LabelVector::len);
    if labels_by_modality.values().any(|l| l.len() != n) {
        return Err(AnchorError::Misaligned);
    }
    let mut column_names = Vec::with_capacity(4 * labels_by_modality.len());
    let mut per_mod = Vec::with_capacity(labels_by_modality.len());
    for (&m, labels) in labels_by_modality {
        let stats = stats_by_modality.get(&m).ok_or(AnchorError::MissingModality(m))?;
        column_names.extend(stat_column_names(m));
        per_mod.push((labels, stats));
    }
    let mut data = Vec::with_capacity(n * column_names.len());
    for i in 0..n {
        for (labels, stats) in &per_mod {
            let l = labels.labels[i];
            let s = stats.get(l).ok_or(AnchorError::LabelOutOfRange {
                modality: stats.modality,
                label: l,
                k: stats.k(),
            })?;
            data.extend([s.mean, s.var, s.count as f64, l as f64]);
        }
    }
    Ok(FeatureBlock::new(n, column_names, data))
}
