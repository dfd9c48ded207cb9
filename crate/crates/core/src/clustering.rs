//! Per-modality k-means (k-means++ seeding, Lloyd iterations) and 2-D
//! projections for cluster plots.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::EmbeddingMatrix;
use crate::modality::Modality;
use crate::preprocess::{self, PreprocessError, Preprocessor};

pub const DEFAULT_K: usize = 300;
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty matrix")]
    Empty,
    #[error("dimension mismatch: centroids have {expected} columns, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("length mismatch: {rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("label {label} out of range for k = {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("need at least {min} rows, got {rows}")]
    TooSmall { min: usize, rows: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

/// Fitted preprocessing plus `k` centroids for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub modality: Modality,
    pub k: usize,
    /// `k` rows in the preprocessed space.
    pub centroids: Vec<Vec<f64>>,
    pub preprocessing: Preprocessor,
    /// Final within-cluster SSE on the training matrix.
    pub inertia: f64,
    pub n_iter: usize,
    pub seed: u64,
    /// Inertia after the initial assignment and after every Lloyd step.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub modality: Modality,
    pub labels: Vec<usize>,
}

impl LabelVector {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            modality: self.modality,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(matrix: &EmbeddingMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let n = matrix.n_rows();
    let pairs: Vec<(usize, f64)> = if n * centroids.len() >= PAR_THRESHOLD {
        (0..n)
            .into_par_iter()
            .map(|i| nearest(matrix.row(i), centroids))
            .collect()
    } else {
        (0..n).map(|i| nearest(matrix.row(i), centroids)).collect()
    };
    pairs.into_iter().unzip()
}

/// Greedy k-means++: each step draws `2 + ln k` candidates by D² sampling
/// and keeps the one that lowers the potential most.
fn kmeans_pp_init(matrix: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = matrix.n_rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(matrix.row(first).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(matrix.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // all remaining points coincide with a centroid
            let pick = chosen.iter().position(|&c| !c).unwrap_or(0);
            chosen[pick] = true;
            centroids.push(matrix.row(pick).to_vec());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = sample_d2(&d2, rng.random::<f64>() * total);
            let c = matrix.row(cand);
            let next: Vec<f64> = d2
                .iter()
                .enumerate()
                .map(|(i, &d)| d.min(sq_dist(matrix.row(i), c)))
                .collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(bp, _, _)| pot < *bp) {
                best = Some((pot, cand, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        chosen[pick] = true;
        d2 = next;
        centroids.push(matrix.row(pick).to_vec());
    }
    centroids
}

fn sample_d2(d2: &[f64], mut target: f64) -> usize {
    for (i, &w) in d2.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if target < w {
            return i;
        }
        target -= w;
    }
    // rounding can run off the end; take the last positive weight
    d2.iter().rposition(|&w| w > 0.0).unwrap()
}

fn lloyd(
    matrix: &EmbeddingMatrix,
    mut centroids: Vec<Vec<f64>>,
    params: &KMeansParams,
) -> (Vec<Vec<f64>>, Vec<usize>, f64, usize, Vec<f64>) {
    let k = centroids.len();
    let d = matrix.n_cols();
    let (mut labels, dists) = assign_all(matrix, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut history = vec![inertia];
    let mut n_iter = 0;

    for it in 1..=params.max_iter {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(matrix.row(i)) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Re-seed empty clusters at the points farthest from their centroid.
        let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut far: Vec<(usize, f64)> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, sq_dist(matrix.row(i), &next[l])))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (slot, &j) in empties.iter().enumerate() {
                if let Some(&(i, _)) = far.get(slot) {
                    next[j] = matrix.row(i).to_vec();
                }
            }
        }

        let (new_labels, dists) = assign_all(matrix, &next);
        let new_inertia: f64 = dists.iter().sum();
        debug_assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "Lloyd step increased inertia: {inertia} -> {new_inertia}"
        );
        let improvement = if inertia > 0.0 {
            (inertia - new_inertia) / inertia
        } else {
            0.0
        };
        centroids = next;
        labels = new_labels;
        inertia = new_inertia;
        history.push(inertia);
        n_iter = it;
        if improvement < params.tol {
            break;
        }
    }
    (centroids, labels, inertia, n_iter, history)
}

/// Fits k-means on `matrix` as given (no preprocessing). If `k` exceeds the
/// row count it is reduced with a warning.
pub fn fit_kmeans(matrix: &EmbeddingMatrix, k: usize, seed: u64, params: &KMeansParams) -> Result<ClusterModel> {
    if matrix.n_rows() == 0 || matrix.n_cols() == 0 {
        return Err(ClusterError::Empty);
    }
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let k = if k > matrix.n_rows() {
        warn!(
            requested = k,
            n_rows = matrix.n_rows(),
            "k reduced to the number of rows"
        );
        matrix.n_rows()
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(matrix, k, &mut rng);
    Ok(finish(matrix, init, seed, params, Preprocessor::Identity))
}

/// Runs Lloyd iterations from the given initial centroids.
pub fn fit_kmeans_from(matrix: &EmbeddingMatrix, init: Vec<Vec<f64>>, params: &KMeansParams) -> Result<ClusterModel> {
    if matrix.n_rows() == 0 || matrix.n_cols() == 0 {
        return Err(ClusterError::Empty);
    }
    if init.is_empty() {
        return Err(ClusterError::ZeroK);
    }
    if let Some(bad) = init.iter().find(|c| c.len() != matrix.n_cols()) {
        return Err(ClusterError::DimensionMismatch {
            expected: bad.len(),
            actual: matrix.n_cols(),
        });
    }
    Ok(finish(matrix, init, 0, params, Preprocessor::Identity))
}

fn finish(
    matrix: &EmbeddingMatrix,
    init: Vec<Vec<f64>>,
    seed: u64,
    params: &KMeansParams,
    preprocessing: Preprocessor,
) -> ClusterModel {
    let (centroids, _labels, inertia, n_iter, inertia_history) = lloyd(matrix, init, params);
    ClusterModel {
        modality: matrix.modality,
        k: centroids.len(),
        centroids,
        preprocessing,
        inertia,
        n_iter,
        seed,
        inertia_history,
    }
}

/// Fits the modality's default preprocessing on `raw`, then k-means in the
/// preprocessed space. Returns the model and the training labels.
pub fn fit_modality(
    raw: &EmbeddingMatrix,
    k: usize,
    svd_rank: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<(ClusterModel, LabelVector)> {
    if raw.n_rows() == 0 {
        return Err(ClusterError::Empty);
    }
    let pre = if raw.modality == Modality::Text && raw.n_rows() < 2 {
        Preprocessor::Identity
    } else {
        Preprocessor::fit_for(raw.modality, raw, svd_rank, seed)?
    };
    let space = pre.apply(raw)?;
    let mut model = fit_kmeans(&space, k, seed, params)?;
    model.preprocessing = pre;
    model.modality = raw.modality;
    let labels = assign_preprocessed(&model, &space)?;
    Ok((model, labels))
}

fn assign_preprocessed(model: &ClusterModel, space: &EmbeddingMatrix) -> Result<LabelVector> {
    if space.n_cols() != model.dim() {
        return Err(ClusterError::DimensionMismatch {
            expected: model.dim(),
            actual: space.n_cols(),
        });
    }
    Ok(LabelVector {
        modality: model.modality,
        labels: assign_all(space, &model.centroids).0,
    })
}

/// Applies the model's preprocessing, then maps each row to its nearest
/// centroid (squared Euclidean, ties to the lowest index).
pub fn assign(model: &ClusterModel, matrix: &EmbeddingMatrix) -> Result<LabelVector> {
    let space = model.preprocessing.apply(matrix).map_err(|e| match e {
        PreprocessError::DimensionMismatch { expected, actual } => ClusterError::DimensionMismatch { expected, actual },
        other => other.into(),
    })?;
    assign_preprocessed(model, &space)
}

/// Sum of squared distances of each (preprocessed) row to the centroid named
/// by its label.
pub fn inertia(model: &ClusterModel, matrix: &EmbeddingMatrix, labels: &LabelVector) -> Result<f64> {
    if matrix.n_rows() != labels.len() {
        return Err(ClusterError::LengthMismatch {
            rows: matrix.n_rows(),
            labels: labels.len(),
        });
    }
    let space = model.preprocessing.apply(matrix)?;
    if space.n_cols() != model.dim() {
        return Err(ClusterError::DimensionMismatch {
            expected: model.dim(),
            actual: space.n_cols(),
        });
    }
    let mut total = 0.0;
    for (row, &l) in space.rows().zip(&labels.labels) {
        let c = model
            .centroids
            .get(l)
            .ok_or(ClusterError::LabelOutOfRange { label: l, k: model.k })?;
        total += sq_dist(row, c);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
}

/// Two-component PCA projection of `matrix`, paired with labels.
pub fn project_2d(matrix: &EmbeddingMatrix, labels: &LabelVector, seed: u64) -> Result<Vec<ProjectedPoint>> {
    if matrix.n_rows() < 3 {
        return Err(ClusterError::TooSmall {
            min: 3,
            rows: matrix.n_rows(),
        });
    }
    if matrix.n_rows() != labels.len() {
        return Err(ClusterError::LengthMismatch {
            rows: matrix.n_rows(),
            labels: labels.len(),
        });
    }
    let svd = preprocess::fit_truncated_svd(matrix, 2, seed)?;
    let proj = preprocess::apply_svd(&svd, matrix)?;
    Ok(proj
        .rows()
        .zip(&labels.labels)
        .map(|(r, &cluster)| ProjectedPoint {
            x: r[0],
            y: r.get(1).copied().unwrap_or(0.0),
            cluster,
        })
        .collect())
}

/// Writes `x,y,cluster` CSV.
pub fn write_projection_csv(points: &[ProjectedPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "x,y,cluster")?;
    for p in points {
        writeln!(out, "{},{},{}", p.x, p.y, p.cluster)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(Modality::Video, rows).unwrap()
    }

    fn one_d(values: &[f64]) -> EmbeddingMatrix {
        mat(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>())
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let m = mat(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![-2.0, 3.0]]);
        let model = fit_kmeans(&m, 4, 3, &KMeansParams::default()).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut cents = model.centroids.clone();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rows: Vec<Vec<f64>> = m.rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cents, rows);
    }

    #[test]
    fn k_one_is_the_mean() {
        let m = mat(&[vec![0.0, 2.0], vec![2.0, 4.0], vec![4.0, 0.0]]);
        let model = fit_kmeans(&m, 1, 0, &KMeansParams::default()).unwrap();
        assert!((model.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((model.centroids[0][1] - 2.0).abs() < 1e-12);
        // SSE about the mean: (4+0) + (0+4) + (4+4) = 16
        assert!((model.inertia - 16.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs() {
        let m = one_d(&[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let model = fit_kmeans(&m, 2, 11, &KMeansParams::default()).unwrap();
        let mut c: Vec<f64> = model.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.1).abs() < 1e-12);
        assert!((c[1] - 10.1).abs() < 1e-12);
        // brute force over all 2-partitions (each side non-empty)
        let vals = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2];
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 6) - 1 {
            let mut sse = 0.0;
            for side in [true, false] {
                let g: Vec<f64> = (0..6)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| vals[i])
                    .collect();
                let mu = g.iter().sum::<f64>() / g.len() as f64;
                sse += g.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
            }
            best = best.min(sse);
        }
        assert!((model.inertia - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn k_reduced_to_rows() {
        let m = one_d(&[1.0, 2.0]);
        let model = fit_kmeans(&m, 5, 0, &KMeansParams::default()).unwrap();
        assert_eq!(model.k, 2);
        assert!(matches!(
            fit_kmeans(
                &EmbeddingMatrix::zeros(Modality::Text, 0, 2),
                2,
                0,
                &KMeansParams::default()
            ),
            Err(ClusterError::Empty)
        ));
    }

    #[test]
    fn duplicate_points_still_converge() {
        let m = one_d(&[1.0, 1.0, 1.0, 1.0]);
        let model = fit_kmeans(&m, 3, 0, &KMeansParams::default()).unwrap();
        assert_eq!(model.k, 3);
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn assign_rows_at_centroids_and_ties() {
        let model = fit_kmeans_from(
            &one_d(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
            (0..6).map(|v| vec![v as f64]).collect(),
            &KMeansParams { max_iter: 0, tol: 1e-4 },
        )
        .unwrap();
        let labels = assign(&model, &one_d(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(labels.labels, vec![0, 1, 2, 3, 4, 5]);

        // equidistant to centroids 2 and 5
        let tie = ClusterModel {
            centroids: vec![vec![100.0], vec![100.0], vec![1.0], vec![100.0], vec![100.0], vec![5.0]],
            k: 6,
            ..model.clone()
        };
        assert_eq!(assign(&tie, &one_d(&[3.0])).unwrap().labels, vec![2]);
        assert!(matches!(
            assign(&tie, &mat(&[vec![1.0, 2.0]])),
            Err(ClusterError::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn inertia_simple_cases() {
        let model = fit_kmeans_from(&one_d(&[0.0]), vec![vec![0.0]], &KMeansParams::default()).unwrap();
        let lv = LabelVector {
            modality: Modality::Video,
            labels: vec![0],
        };
        assert_eq!(inertia(&model, &one_d(&[0.0]), &lv).unwrap(), 0.0);
        assert_eq!(inertia(&model, &one_d(&[2.0]), &lv).unwrap(), 4.0);
        assert!(matches!(
            inertia(&model, &one_d(&[2.0, 1.0]), &lv),
            Err(ClusterError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn projection_of_collinear_points() {
        let m = EmbeddingMatrix::from_rows(
            Modality::Text,
            &[
                vec![0.0, 0.0, 0.0],
                vec![1.0, 2.0, 3.0],
                vec![2.0, 4.0, 6.0],
                vec![-1.0, -2.0, -3.0],
            ],
        )
        .unwrap();
        let labels = LabelVector {
            modality: Modality::Text,
            labels: vec![0, 0, 1, 1],
        };
        let pts = project_2d(&m, &labels, 0).unwrap();
        assert_eq!(pts.len(), 4);
        let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        let mean = ys.iter().sum::<f64>() / 4.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(var < 1e-20);
        let mut buf = Vec::new();
        write_projection_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,cluster\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(matches!(
            project_2d(&one_d(&[1.0, 2.0]), &labels, 0),
            Err(ClusterError::TooSmall { .. })
        ));
    }
}
