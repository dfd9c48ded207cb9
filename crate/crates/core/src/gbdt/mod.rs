//! Histogram gradient-boosted regression trees with an L1 objective.
//!
//! Each round grows one tree best-first on the sign of the residual, up to
//! `num_leaves` leaves, then replaces every leaf value by the median residual
//! of its rows. With `learning_rate <= 1` this never increases training MAE.

mod binning;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

pub use binning::FeatureBins;

use crate::fusion::FeatureBlock;
use crate::util::median;

pub const FORMAT_VERSION: u32 = 1;
const MIN_GAIN: f64 = 1e-10;
const PAR_HIST_THRESHOLD: usize = 1 << 15;

#[derive(Debug, thiserror::Error)]
pub enum GbdtError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("non-finite target at row {row}")]
    NonFiniteTarget { row: usize },
    #[error("{rows} rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("model expects {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GbdtError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub num_leaves: usize,
    pub n_rounds: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    /// 0 disables early stopping.
    pub early_stopping_rounds: usize,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            num_leaves: 31,
            n_rounds: 500,
            min_samples_leaf: 20,
            max_bins: 255,
            early_stopping_rounds: 50,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GbdtError::InvalidParams(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.num_leaves < 2 {
            return Err(GbdtError::InvalidParams("num_leaves must be >= 2".into()));
        }
        if !(2..=65535).contains(&self.max_bins) {
            return Err(GbdtError::InvalidParams("max_bins must be in [2, 65535]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        bin: u16,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn splits(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, gain, .. } => Some((*feature, *gain)),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub format_version: u32,
    pub params: GbdtParams,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub bins: Vec<FeatureBins>,
    pub feature_names: Vec<String>,
    /// Number of splits per feature.
    pub split_counts: Vec<usize>,
    /// Summed split gain per feature.
    pub split_gains: Vec<f64>,
    /// Training MAE after each kept round (index 0 is the base score).
    pub train_mae: Vec<f64>,
    /// Validation MAE per round when a validation set was given.
    pub valid_mae: Vec<f64>,
    pub best_round: Option<usize>,
}

impl BoostedModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.base_score
            + self
                .trees
                .iter()
                .map(|t| self.params.learning_rate * t.predict_row(row))
                .sum::<f64>()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| GbdtError::Format(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: BoostedModel = serde_json::from_str(&text).map_err(|e| GbdtError::Format(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(GbdtError::Format(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    fn recompute_importance(&mut self) {
        let d = self.n_features();
        self.split_counts = vec![0; d];
        self.split_gains = vec![0.0; d];
        for t in &self.trees {
            for (f, g) in t.splits() {
                self.split_counts[f] += 1;
                self.split_gains[f] += g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceKind {
    Splits,
    Gain,
}

/// Per-feature importance, sorted descending; ties keep feature order.
pub fn feature_importance(model: &BoostedModel, kind: ImportanceKind) -> Vec<(String, f64)> {
    let mut v: Vec<(usize, f64)> = (0..model.n_features())
        .map(|f| {
            (
                f,
                match kind {
                    ImportanceKind::Splits => model.split_counts[f] as f64,
                    ImportanceKind::Gain => model.split_gains[f],
                },
            )
        })
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter()
        .map(|(f, s)| (model.feature_names[f].clone(), s))
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mae_of(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

fn check_finite(x: &FeatureBlock) -> Result<()> {
    if let Some(pos) = x.data.iter().position(|v| !v.is_finite()) {
        let w = x.width().max(1);
        return Err(GbdtError::NonFiniteFeature {
            row: pos / w,
            col: pos % w,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    bin: u16,
    gain: f64,
}

struct Leaf {
    node: usize,
    rows: Vec<u32>,
    /// Flattened `(sum_g, count)` per feature bin.
    hist: Vec<(f64, u32)>,
    best: Option<SplitChoice>,
}

struct Grower<'a> {
    binned: &'a [Vec<u16>],
    offsets: Vec<usize>,
    n_bins: Vec<usize>,
    min_leaf: usize,
}

impl Grower<'_> {
    fn build_hist(&self, rows: &[u32], grad: &[f64]) -> Vec<(f64, u32)> {
        let total = *self.offsets.last().unwrap();
        let per_feature = |f: usize| {
            let mut h = vec![(0.0, 0u32); self.n_bins[f]];
            let col = &self.binned[f];
            for &r in rows {
                let slot = &mut h[col[r as usize] as usize];
                slot.0 += grad[r as usize];
                slot.1 += 1;
            }
            h
        };
        let parts: Vec<Vec<(f64, u32)>> = if rows.len() * self.binned.len() >= PAR_HIST_THRESHOLD {
            (0..self.binned.len()).into_par_iter().map(per_feature).collect()
        } else {
            (0..self.binned.len()).map(per_feature).collect()
        };
        let mut hist = Vec::with_capacity(total);
        for p in parts {
            hist.extend(p);
        }
        hist
    }

    fn best_split(&self, hist: &[(f64, u32)]) -> Option<SplitChoice> {
        let (sum, count) = hist[..self.n_bins.first().copied().unwrap_or(0)]
            .iter()
            .fold((0.0, 0u32), |a, h| (a.0 + h.0, a.1 + h.1));
        if (count as usize) < 2 * self.min_leaf {
            return None;
        }
        let parent = sum * sum / count as f64;
        let mut best: Option<SplitChoice> = None;
        for (f, &nb) in self.n_bins.iter().enumerate() {
            if nb < 2 {
                continue;
            }
            let h = &hist[self.offsets[f]..self.offsets[f] + nb];
            let (mut ls, mut lc) = (0.0, 0u32);
            for (b, &(s, c)) in h[..nb - 1].iter().enumerate() {
                ls += s;
                lc += c;
                let rc = count - lc;
                if (lc as usize) < self.min_leaf {
                    continue;
                }
                if (rc as usize) < self.min_leaf {
                    break;
                }
                let rs = sum - ls;
                let gain = ls * ls / lc as f64 + rs * rs / rc as f64 - parent;
                if gain > MIN_GAIN && best.is_none_or(|bs| gain > bs.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        bin: b as u16,
                        gain,
                    });
                }
            }
        }
        best
    }

    /// Grows one tree; returns the tree (leaf values unset) and the rows of
    /// each leaf node.
    fn grow(
        &self,
        n_rows: usize,
        grad: &[f64],
        num_leaves: usize,
        bins: &[FeatureBins],
    ) -> (Tree, Vec<(usize, Vec<u32>)>) {
        let rows: Vec<u32> = (0..n_rows as u32).collect();
        let hist = self.build_hist(&rows, grad);
        let best = self.best_split(&hist);
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut leaves = vec![Leaf {
            node: 0,
            rows,
            hist,
            best,
        }];
        while leaves.len() < num_leaves {
            let pick = leaves
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.best.map(|b| (i, b.gain)))
                .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                    Some((_, bg)) if bg >= g => acc,
                    _ => Some((i, g)),
                });
            let Some((li, _)) = pick else { break };
            let leaf = leaves.swap_remove(li);
            let split = leaf.best.unwrap();
            let col = &self.binned[split.feature];
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                leaf.rows.iter().partition(|&&r| col[r as usize] <= split.bin);

            let (small, large_is_left) = if left_rows.len() <= right_rows.len() {
                (&left_rows, false)
            } else {
                (&right_rows, true)
            };
            let small_hist = self.build_hist(small, grad);
            let large_hist: Vec<(f64, u32)> = leaf
                .hist
                .iter()
                .zip(&small_hist)
                .map(|(p, s)| (p.0 - s.0, p.1 - s.1))
                .collect();
            let (left_hist, right_hist) = if large_is_left {
                (large_hist, small_hist)
            } else {
                (small_hist, large_hist)
            };

            let left_node = nodes.len();
            let right_node = left_node + 1;
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[leaf.node] = Node::Split {
                feature: split.feature,
                bin: split.bin,
                threshold: bins[split.feature].threshold(split.bin),
                gain: split.gain,
                left: left_node,
                right: right_node,
            };
            // keep creation order stable for tie-breaking
            let left_best = self.best_split(&left_hist);
            let right_best = self.best_split(&right_hist);
            leaves.insert(
                li.min(leaves.len()),
                Leaf {
                    node: left_node,
                    rows: left_rows,
                    hist: left_hist,
                    best: left_best,
                },
            );
            leaves.push(Leaf {
                node: right_node,
                rows: right_rows,
                hist: right_hist,
                best: right_best,
            });
        }
        let mut leaf_rows: Vec<(usize, Vec<u32>)> = leaves.into_iter().map(|l| (l.node, l.rows)).collect();
        leaf_rows.sort_by_key(|(n, _)| *n);
        (Tree { nodes }, leaf_rows)
    }
}

/// Fits an L1 boosted ensemble. With a validation set and
/// `early_stopping_rounds > 0`, training stops once validation MAE has not
/// improved for that many rounds and the ensemble is truncated to the best
/// round.
pub fn train(
    x: &FeatureBlock,
    y: &[f64],
    params: &GbdtParams,
    valid: Option<(&FeatureBlock, &[f64])>,
) -> Result<BoostedModel> {
    params.validate()?;
    if x.n_rows != y.len() {
        return Err(GbdtError::LengthMismatch {
            rows: x.n_rows,
            targets: y.len(),
        });
    }
    if x.n_rows == 0 {
        return Err(GbdtError::EmptyTraining);
    }
    check_finite(x)?;
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(GbdtError::NonFiniteTarget { row });
    }
    if let Some((xv, yv)) = valid {
        if xv.width() != x.width() {
            return Err(GbdtError::DimensionMismatch {
                expected: x.width(),
                actual: xv.width(),
            });
        }
        if xv.n_rows != yv.len() {
            return Err(GbdtError::LengthMismatch {
                rows: xv.n_rows,
                targets: yv.len(),
            });
        }
        check_finite(xv)?;
    }

    let (n, d) = (x.n_rows, x.width());
    let base_score = median(y).expect("non-empty");
    let bins: Vec<FeatureBins> = (0..d)
        .map(|f| {
            let col: Vec<f64> = (0..n).map(|i| x.data[i * d + f]).collect();
            FeatureBins::fit(&col, params.max_bins)
        })
        .collect();
    let binned: Vec<Vec<u16>> = (0..d)
        .map(|f| (0..n).map(|i| bins[f].bin(x.data[i * d + f])).collect())
        .collect();

    let mut model = BoostedModel {
        format_version: FORMAT_VERSION,
        params: params.clone(),
        base_score,
        trees: Vec::new(),
        bins,
        feature_names: x.column_names.clone(),
        split_counts: vec![0; d],
        split_gains: vec![0.0; d],
        train_mae: Vec::new(),
        valid_mae: Vec::new(),
        best_round: None,
    };

    let mut pred = vec![base_score; n];
    model.train_mae.push(mae_of(y, &pred));
    if y.iter().all(|&v| v == y[0]) {
        warn!("all training targets are equal; returning a constant model");
        return Ok(model);
    }

    let mut valid_pred = valid.map(|(xv, _)| vec![base_score; xv.n_rows]);
    let mut best_valid = valid.map(|(_, yv)| mae_of(yv, valid_pred.as_ref().unwrap()));
    if let Some(v) = best_valid {
        model.valid_mae.push(v);
        model.best_round = Some(0);
    }

    let grower = Grower {
        binned: &binned,
        offsets: {
            let mut o = Vec::with_capacity(d + 1);
            let mut acc = 0;
            o.push(0);
            for b in &model.bins {
                acc += b.n_bins();
                o.push(acc);
            }
            o
        },
        n_bins: model.bins.iter().map(FeatureBins::n_bins).collect(),
        min_leaf: params.min_samples_leaf.max(1),
    };
    let lr = params.learning_rate;

    for round in 1..=params.n_rounds {
        let grad: Vec<f64> = pred.iter().zip(y).map(|(p, t)| sign(p - t)).collect();
        let (mut tree, leaf_rows) = grower.grow(n, &grad, params.num_leaves, &model.bins);
        let mut moved = false;
        for (node, rows) in &leaf_rows {
            let resid: Vec<f64> = rows.iter().map(|&r| y[r as usize] - pred[r as usize]).collect();
            let value = median(&resid).unwrap_or(0.0);
            if value != 0.0 {
                moved = true;
            }
            tree.nodes[*node] = Node::Leaf { value };
            for &r in rows {
                pred[r as usize] += lr * value;
            }
        }
        if !moved {
            debug!(round, "no leaf moved; stopping");
            break;
        }
        let mae = mae_of(y, &pred);
        debug_assert!(
            mae <= model.train_mae.last().unwrap() + 1e-9,
            "training MAE increased at round {round}"
        );
        model.train_mae.push(mae);

        if let (Some((xv, yv)), Some(vp)) = (valid, valid_pred.as_mut()) {
            for (i, p) in vp.iter_mut().enumerate() {
                *p += lr * tree.predict_row(xv.row(i));
            }
            let v = mae_of(yv, vp);
            model.valid_mae.push(v);
            model.trees.push(tree);
            if v < best_valid.unwrap() {
                best_valid = Some(v);
                model.best_round = Some(round);
            } else if params.early_stopping_rounds > 0
                && round - model.best_round.unwrap_or(0) >= params.early_stopping_rounds
            {
                debug!(round, best = ?model.best_round, "early stopping");
                break;
            }
        } else {
            model.trees.push(tree);
        }
    }

    if let Some(best) = model.best_round.filter(|_| params.early_stopping_rounds > 0) {
        model.trees.truncate(best);
        model.train_mae.truncate(best + 1);
    }
    model.recompute_importance();
    Ok(model)
}

pub fn predict(model: &BoostedModel, x: &FeatureBlock) -> Result<Vec<f64>> {
    if x.width() != model.n_features() {
        return Err(GbdtError::DimensionMismatch {
            expected: model.n_features(),
            actual: x.width(),
        });
    }
    check_finite(x)?;
    Ok((0..x.n_rows).map(|i| model.predict_row(x.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: &[Vec<f64>]) -> FeatureBlock {
        let d = rows.first().map_or(0, Vec::len);
        FeatureBlock::new(
            rows.len(),
            (0..d).map(|j| format!("f{j}")).collect(),
            rows.iter().flatten().copied().collect(),
        )
    }

    fn exact_params() -> GbdtParams {
        GbdtParams {
            learning_rate: 1.0,
            num_leaves: 2,
            n_rounds: 1,
            min_samples_leaf: 1,
            early_stopping_rounds: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rounds_predicts_median() {
        let x = block(&[vec![0.0], vec![1.0], vec![2.0]]);
        let p = GbdtParams {
            n_rounds: 0,
            ..Default::default()
        };
        let m = train(&x, &[1.0, 7.0, 3.0], &p, None).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(predict(&m, &x).unwrap(), vec![3.0; 3]);
    }

    #[test]
    fn constant_target() {
        let x = block(&[vec![0.0], vec![1.0], vec![2.0]]);
        let m = train(&x, &[4.0; 3], &GbdtParams::default(), None).unwrap();
        assert_eq!(m.trees.len(), 0);
        assert_eq!(predict(&m, &x).unwrap(), vec![4.0; 3]);
    }

    #[test]
    fn two_point_hand_trace() {
        let x = block(&[vec![0.0], vec![1.0]]);
        let m = train(&x, &[0.0, 10.0], &exact_params(), None).unwrap();
        assert_eq!(m.base_score, 5.0);
        assert_eq!(m.trees.len(), 1);
        assert_eq!(predict(&m, &x).unwrap(), vec![0.0, 10.0]);
        assert_eq!(m.split_counts, vec![1]);
        assert_eq!(m.split_gains, vec![2.0]);
    }

    #[test]
    fn importance_zero_and_single_split() {
        let x = block(&[vec![0.0, 5.0], vec![1.0, 5.0]]);
        let m = train(&x, &[0.0, 10.0], &exact_params(), None).unwrap();
        let imp = feature_importance(&m, ImportanceKind::Splits);
        assert_eq!(imp, vec![("f0".to_string(), 1.0), ("f1".to_string(), 0.0)]);

        let p0 = GbdtParams {
            n_rounds: 0,
            ..Default::default()
        };
        let m0 = train(&x, &[0.0, 10.0], &p0, None).unwrap();
        assert!(feature_importance(&m0, ImportanceKind::Gain)
            .iter()
            .all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn errors() {
        let x = block(&[vec![0.0], vec![f64::NAN]]);
        assert!(matches!(
            train(&x, &[0.0, 1.0], &GbdtParams::default(), None),
            Err(GbdtError::NonFiniteFeature { row: 1, col: 0 })
        ));
        let x = block(&[vec![0.0]]);
        assert!(matches!(
            train(&x, &[0.0, 1.0], &GbdtParams::default(), None),
            Err(GbdtError::LengthMismatch { .. })
        ));
        assert!(matches!(
            train(&FeatureBlock::empty(0), &[], &GbdtParams::default(), None),
            Err(GbdtError::EmptyTraining)
        ));
        let bad = GbdtParams {
            num_leaves: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&x, &[0.0], &bad, None),
            Err(GbdtError::InvalidParams(_))
        ));
        let m = train(&x, &[1.0], &GbdtParams::default(), None).unwrap();
        assert!(matches!(
            predict(&m, &block(&[vec![1.0, 2.0]])),
            Err(GbdtError::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn test_values_outside_range_clamp() {
        let x = block(&[vec![0.0], vec![1.0]]);
        let m = train(&x, &[0.0, 10.0], &exact_params(), None).unwrap();
        assert_eq!(
            predict(&m, &block(&[vec![-100.0], vec![100.0]])).unwrap(),
            vec![0.0, 10.0]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let x = block(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let p = GbdtParams {
            min_samples_leaf: 1,
            n_rounds: 5,
            ..Default::default()
        };
        let m = train(&x, &[1.0, 2.0, 3.0, 9.0], &p, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(BoostedModel::load(&path).unwrap(), m);
    }
}
