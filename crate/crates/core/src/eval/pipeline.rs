//! Per-fold fit/apply of the whole feature pipeline and the GBDT regressor.
//!
//! Within a fold, preprocessing, clustering, anchor statistics, the semantic
//! table and the booster are all fitted on training rows only. Test rows are
//! only ever assigned to fitted clusters and looked up.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::metrics::{compute_metrics, mae, mape, r2, Metrics};
use super::{EvalError, Result};
use crate::anchors::{fit_anchor_stats_with, lookup_stat_features, AnchorStats};
use crate::clustering::{assign, fit_modality, ClusterModel, KMeansParams, LabelVector, DEFAULT_K};
use crate::dataset::Dataset;
use crate::fusion::FeatureBlock;
use crate::gbdt::{self, BoostedModel, GbdtParams};
use crate::modality::Modality;
use crate::preprocess::DEFAULT_SVD_RANK;
use crate::semantic::{
    fit_semantic_table, lookup_semantic_features, HashingEmbedder, LlmClient, SemanticOptions, SemanticTable, StubLlm,
    TextEmbedder, DEFAULT_EMBED_DIM,
};
use crate::util::hash64_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    /// Raw modality matrices (embeddings and encoded metadata).
    Orig,
    /// Cluster label per modality.
    ClusterId,
    /// Statistical anchors.
    Stat,
    /// Semantic anchors.
    Gen,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [Self::Orig, Self::ClusterId, Self::Stat, Self::Gen];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Orig => "orig",
            Self::ClusterId => "cluster_id",
            Self::Stat => "stat",
            Self::Gen => "gen",
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orig" => Ok(Self::Orig),
            "cluster_id" | "cluster-id" | "cluster" => Ok(Self::ClusterId),
            "stat" => Ok(Self::Stat),
            "gen" => Ok(Self::Gen),
            other => Err(format!(
                "unknown feature group `{other}` (expected orig, cluster_id, stat or gen)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Modalities to use; empty means every modality in the dataset.
    pub modalities: Vec<Modality>,
    pub features: BTreeSet<FeatureGroup>,
    pub k: usize,
    pub k_per_modality: BTreeMap<Modality, usize>,
    pub svd_rank: usize,
    pub kmeans: KMeansParams,
    pub anchor_shrinkage: Option<f64>,
    pub gbdt: GbdtParams,
    pub semantic: SemanticOptions,
    pub embed_dim: usize,
    /// Name of the LLM backend; recorded in the fingerprint only.
    pub llm: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modalities: Vec::new(),
            features: FeatureGroup::ALL.into_iter().collect(),
            k: DEFAULT_K,
            k_per_modality: BTreeMap::new(),
            svd_rank: DEFAULT_SVD_RANK,
            kmeans: KMeansParams::default(),
            anchor_shrinkage: None,
            gbdt: GbdtParams::default(),
            semantic: SemanticOptions::default(),
            embed_dim: DEFAULT_EMBED_DIM,
            llm: "stub".into(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_features(mut self, groups: &[FeatureGroup]) -> Self {
        self.features = groups.iter().copied().collect();
        self
    }

    pub fn k_for(&self, m: Modality) -> usize {
        self.k_per_modality.get(&m).copied().unwrap_or(self.k)
    }

    /// Enabled modalities present in `dataset`, in canonical order.
    pub fn resolve_modalities(&self, dataset: &Dataset) -> Result<Vec<Modality>> {
        if self.modalities.is_empty() {
            return Ok(dataset.modalities());
        }
        let mut mods: Vec<Modality> = self.modalities.clone();
        mods.sort();
        mods.dedup();
        for &m in &mods {
            if dataset.matrix(m).is_none() {
                return Err(EvalError::MissingModality(m));
            }
        }
        Ok(mods)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<Vec<Modality>> {
        if self.features.is_empty() {
            return Err(EvalError::Config("at least one feature group must be enabled".into()));
        }
        if self.k == 0 || self.k_per_modality.values().any(|&k| k == 0) {
            return Err(EvalError::Config("k must be at least 1".into()));
        }
        self.gbdt.validate()?;
        let mods = self.resolve_modalities(dataset)?;
        if self.features.contains(&FeatureGroup::Gen) && !mods.iter().any(|m| m.is_semantic()) {
            return Err(EvalError::Config(
                "feature group `gen` needs at least one of the text, video or audio modalities".into(),
            ));
        }
        Ok(mods)
    }

    /// Short hex digest of this config together with the fold plan's shape
    /// and seed.
    pub fn fingerprint(&self, plan: &FoldPlan) -> String {
        let doc = serde_json::json!({
            "config": self,
            "n_folds": plan.n_folds,
            "plan_seed": plan.seed,
            "n_rows": plan.len(),
        });
        hash64_hex(doc.to_string().as_bytes())
    }

    fn needs_clusters(&self) -> bool {
        self.features.iter().any(|g| *g != FeatureGroup::Orig)
    }

    fn seed_for(&self, m: Modality) -> u64 {
        self.seed ^ ((m as u64 + 1) << 32)
    }
}

/// Everything fitted for one fold. Depends only on the fold's training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub cluster_models: BTreeMap<Modality, ClusterModel>,
    pub anchor_stats: BTreeMap<Modality, AnchorStats>,
    pub semantic: Option<SemanticTable>,
    pub train_features: FeatureBlock,
    pub model: BoostedModel,
}

impl FoldArtifacts {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("artifacts serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    pub mape: f64,
    /// `None` when R² is undefined on this fold (constant targets).
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_fingerprint: String,
    pub config: PipelineConfig,
    pub modalities: Vec<Modality>,
    pub n_folds: usize,
    pub plan_seed: u64,
    /// Pooled over the union of test folds.
    pub metrics: Metrics,
    pub folds: Vec<FoldMetrics>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub post_id: String,
    pub user_id: String,
    pub fold: usize,
    pub y: f64,
    pub yhat: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub report: MetricReport,
    /// Test predictions in dataset row order.
    pub predictions: Vec<PredictionRow>,
    pub artifacts: Vec<FoldArtifacts>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Columns `post_id,user_id,fold,y,yhat`; values use the shortest exact
/// decimal representation.
pub fn write_predictions_csv(rows: &[PredictionRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "post_id,user_id,fold,y,yhat")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&r.post_id),
            csv_field(&r.user_id),
            r.fold,
            r.y,
            r.yhat
        )?;
    }
    Ok(())
}

fn report_notes(config: &PipelineConfig) -> Vec<String> {
    let g = &config.gbdt;
    vec![
        "metrics are pooled over all test rows; per-fold values are listed separately".into(),
        "R2 = 1 - SS_res / SS_tot, with SS_tot taken about the mean of the observed targets".into(),
        "MAPE denominators are max(|y|, 1e-8), reported in percent".into(),
        format!(
            "gbdt: objective l1, learning_rate {}, num_leaves {}, n_rounds {}, min_samples_leaf {}, max_bins {}; \
             no validation split, so early stopping ({} rounds) is inactive",
            g.learning_rate, g.num_leaves, g.n_rounds, g.min_samples_leaf, g.max_bins, g.early_stopping_rounds
        ),
        "clustering, anchors, semantic table and booster are refitted on each fold's training rows".into(),
    ]
}

struct Fitted {
    labels_train: BTreeMap<Modality, LabelVector>,
    labels_test: BTreeMap<Modality, LabelVector>,
    models: BTreeMap<Modality, ClusterModel>,
    stats: BTreeMap<Modality, AnchorStats>,
    semantic: Option<SemanticTable>,
}

fn assemble(
    ds: &Dataset,
    mods: &[Modality],
    labels: &BTreeMap<Modality, LabelVector>,
    fitted: &Fitted,
    config: &PipelineConfig,
) -> Result<FeatureBlock> {
    let n = ds.len();
    let mut blocks = Vec::new();
    for group in &config.features {
        match group {
            FeatureGroup::Orig => {
                for &m in mods {
                    blocks.push(FeatureBlock::from_matrix(
                        ds.matrix(m).expect("validated"),
                        &format!("{m}_orig"),
                    ));
                }
            }
            FeatureGroup::ClusterId => {
                for (m, lv) in labels {
                    blocks.push(FeatureBlock::new(
                        n,
                        vec![format!("{m}_cluster_id")],
                        lv.labels.iter().map(|&l| l as f64).collect(),
                    ));
                }
            }
            FeatureGroup::Stat => blocks.push(lookup_stat_features(labels, &fitted.stats)?),
            FeatureGroup::Gen => {
                let table = fitted.semantic.as_ref().expect("fitted when gen is enabled");
                blocks.push(lookup_semantic_features(labels, table)?);
            }
        }
    }
    Ok(FeatureBlock::hstack(&blocks))
}

fn run_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    mods: &[Modality],
    config: &PipelineConfig,
    client: &dyn LlmClient,
    embedder: &dyn TextEmbedder,
) -> Result<(FoldArtifacts, Vec<usize>, Vec<f64>)> {
    let train_rows = plan.train_rows(fold);
    let test_rows = plan.test_rows(fold);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(EvalError::EmptyFold(fold));
    }
    let train = dataset.subset(&train_rows);
    let test = dataset.subset(&test_rows);
    let y_train = train.popularity();

    let mut fitted = Fitted {
        labels_train: BTreeMap::new(),
        labels_test: BTreeMap::new(),
        models: BTreeMap::new(),
        stats: BTreeMap::new(),
        semantic: None,
    };
    if config.needs_clusters() {
        for &m in mods {
            let raw = train.matrix(m).expect("validated");
            let (model, lv) = fit_modality(
                raw,
                config.k_for(m),
                config.svd_rank,
                config.seed_for(m),
                &config.kmeans,
            )?;
            fitted
                .labels_test
                .insert(m, assign(&model, test.matrix(m).expect("validated"))?);
            if config.features.contains(&FeatureGroup::Stat) {
                fitted.stats.insert(
                    m,
                    fit_anchor_stats_with(&lv, &y_train, model.k, config.anchor_shrinkage)?,
                );
            }
            fitted.labels_train.insert(m, lv);
            fitted.models.insert(m, model);
        }
    }
    if config.features.contains(&FeatureGroup::Gen) {
        let sem_models: BTreeMap<Modality, ClusterModel> = fitted
            .models
            .iter()
            .filter(|(m, _)| m.is_semantic())
            .map(|(m, c)| (*m, c.clone()))
            .collect();
        fitted.semantic = Some(fit_semantic_table(
            &train,
            &sem_models,
            &fitted.labels_train,
            client,
            embedder,
            &config.semantic,
        )?);
    }

    let x_train = assemble(&train, mods, &fitted.labels_train, &fitted, config)?;
    let x_test = assemble(&test, mods, &fitted.labels_test, &fitted, config)?;
    let model = gbdt::train(&x_train, &y_train, &config.gbdt, None)?;
    let yhat = gbdt::predict(&model, &x_test)?;

    let artifacts = FoldArtifacts {
        fold,
        cluster_models: fitted.models,
        anchor_stats: fitted.stats,
        semantic: fitted.semantic,
        train_features: x_train,
        model,
    };
    Ok((artifacts, test_rows, yhat))
}

/// [`run_pipeline_with`] using the stub LLM and the hashing embedder.
pub fn run_pipeline(dataset: &Dataset, plan: &FoldPlan, config: &PipelineConfig) -> Result<PipelineResult> {
    run_pipeline_with(
        dataset,
        plan,
        config,
        &StubLlm::new(),
        &HashingEmbedder::new(config.embed_dim),
    )
}

pub fn run_pipeline_with(
    dataset: &Dataset,
    plan: &FoldPlan,
    config: &PipelineConfig,
    client: &dyn LlmClient,
    embedder: &dyn TextEmbedder,
) -> Result<PipelineResult> {
    if plan.len() != dataset.len() {
        return Err(EvalError::PlanMismatch {
            plan: plan.len(),
            data: dataset.len(),
        });
    }
    let mods = config.validate(dataset)?;
    let outputs: Vec<(FoldArtifacts, Vec<usize>, Vec<f64>)> = (0..plan.n_folds)
        .into_par_iter()
        .map(|f| run_fold(dataset, plan, f, &mods, config, client, embedder))
        .collect::<Result<_>>()?;

    let y_all = dataset.popularity();
    let mut yhat_all: Vec<Option<(usize, f64)>> = vec![None; dataset.len()];
    let mut folds = Vec::with_capacity(plan.n_folds);
    let mut artifacts = Vec::with_capacity(plan.n_folds);
    for (art, rows, yhat) in outputs {
        let y: Vec<f64> = rows.iter().map(|&i| y_all[i]).collect();
        folds.push(FoldMetrics {
            fold: art.fold,
            n_train: art.train_features.n_rows,
            n_test: rows.len(),
            mae: mae(&y, &yhat)?,
            mape: mape(&y, &yhat)?,
            // may be undefined on a single fold with constant targets
            r2: r2(&y, &yhat).ok(),
        });
        for (&i, &p) in rows.iter().zip(&yhat) {
            yhat_all[i] = Some((art.fold, p));
        }
        artifacts.push(art);
    }

    let records = dataset.records();
    let predictions: Vec<PredictionRow> = yhat_all
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.map(|(fold, yhat)| PredictionRow {
                post_id: records[i].post_id.clone(),
                user_id: records[i].user_id.clone(),
                fold,
                y: y_all[i],
                yhat,
            })
        })
        .collect();
    let y: Vec<f64> = predictions.iter().map(|p| p.y).collect();
    let yhat: Vec<f64> = predictions.iter().map(|p| p.yhat).collect();
    let metrics = compute_metrics(&y, &yhat)?;

    let report = MetricReport {
        config_fingerprint: config.fingerprint(plan),
        config: config.clone(),
        modalities: mods,
        n_folds: plan.n_folds,
        plan_seed: plan.seed,
        metrics,
        folds,
        notes: report_notes(config),
    };
    Ok(PipelineResult {
        report,
        predictions,
        artifacts,
    })
}
