use std::io::Write;

use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::pipeline::{run_pipeline_with, FeatureGroup, PipelineConfig};
use super::{EvalError, Result};
use crate::dataset::Dataset;
use crate::modality::Modality;
use crate::semantic::{HashingEmbedder, LlmClient, StubLlm, TextEmbedder};
use crate::util::hash64_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub label: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_fingerprint: String,
    pub n: usize,
    pub mape: f64,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Header of the first column (`config` for ladders, `k` for sweeps).
    pub key: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Digest over every row's config fingerprint, in row order.
    pub fn fingerprint(&self) -> String {
        let joined: Vec<&str> = self.rows.iter().map(|r| r.config_fingerprint.as_str()).collect();
        hash64_hex(joined.join(",").as_bytes())
    }

    pub fn best(&self) -> Option<&AblationRow> {
        self.rows.iter().min_by(|a, b| a.mape.total_cmp(&b.mape))
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# config_fingerprint: {}", self.fingerprint())?;
        writeln!(out, "{},mape,mae,r2,n,config_fingerprint", self.key)?;
        for r in &self.rows {
            let label = if r.label.contains([',', '"']) {
                format!("\"{}\"", r.label.replace('"', "\"\""))
            } else {
                r.label.clone()
            };
            writeln!(
                out,
                "{label},{:.4},{:.4},{:.4},{},{}",
                r.mape, r.mae, r.r2, r.n, r.config_fingerprint
            )?;
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([self.key.len()])
            .max()
            .unwrap_or(0);
        let mut s = format!("{:<w$}  {:>9}  {:>9}  {:>8}\n", self.key, "MAPE(%)", "MAE", "R2");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<w$}  {:>9.4}  {:>9.4}  {:>8.4}\n",
                r.label, r.mape, r.mae, r.r2
            ));
        }
        s
    }
}

pub fn run_ablation(dataset: &Dataset, plan: &FoldPlan, steps: &[LadderStep]) -> Result<AblationReport> {
    let embed_dim = steps.first().map_or(0, |s| s.config.embed_dim);
    run_ablation_with(
        dataset,
        plan,
        steps,
        &StubLlm::new(),
        &HashingEmbedder::new(embed_dim.max(1)),
    )
}

/// One pipeline run per step, rows in step order.
pub fn run_ablation_with(
    dataset: &Dataset,
    plan: &FoldPlan,
    steps: &[LadderStep],
    client: &dyn LlmClient,
    embedder: &dyn TextEmbedder,
) -> Result<AblationReport> {
    if steps.is_empty() {
        return Err(EvalError::Config("ablation ladder is empty".into()));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for step in steps {
        let res = run_pipeline_with(dataset, plan, &step.config, client, embedder)?;
        let m = res.report.metrics;
        rows.push(AblationRow {
            label: step.label.clone(),
            config_fingerprint: res.report.config_fingerprint,
            n: m.n,
            mape: m.mape,
            mae: m.mae,
            r2: m.r2,
        });
    }
    Ok(AblationReport {
        key: "config".into(),
        rows,
    })
}

pub fn sweep_k(dataset: &Dataset, plan: &FoldPlan, base: &PipelineConfig, ks: &[usize]) -> Result<AblationReport> {
    sweep_k_with(
        dataset,
        plan,
        base,
        ks,
        &StubLlm::new(),
        &HashingEmbedder::new(base.embed_dim),
    )
}

/// One run per `k` (applied to every modality), everything else fixed.
pub fn sweep_k_with(
    dataset: &Dataset,
    plan: &FoldPlan,
    base: &PipelineConfig,
    ks: &[usize],
    client: &dyn LlmClient,
    embedder: &dyn TextEmbedder,
) -> Result<AblationReport> {
    if ks.is_empty() {
        return Err(EvalError::Config("k sweep needs at least one k".into()));
    }
    let steps: Vec<LadderStep> = ks
        .iter()
        .map(|&k| LadderStep {
            label: k.to_string(),
            config: PipelineConfig {
                k,
                k_per_modality: Default::default(),
                ..base.clone()
            },
        })
        .collect();
    let mut report = run_ablation_with(dataset, plan, &steps, client, embedder)?;
    report.key = "k".into();
    Ok(report)
}

/// user; +text; +video; +audio, each with `base`'s feature groups. `gen` is
/// dropped from the user-only row, which has no semantic modality.
pub fn ladder_modalities(base: &PipelineConfig) -> Vec<LadderStep> {
    let order = [Modality::User, Modality::Text, Modality::Video, Modality::Audio];
    (1..=order.len())
        .map(|i| {
            let mods = order[..i].to_vec();
            let mut features = base.features.clone();
            if !mods.iter().any(|m| m.is_semantic()) {
                features.remove(&FeatureGroup::Gen);
            }
            LadderStep {
                label: if i == 1 {
                    "user".into()
                } else {
                    format!("+{}", order[i - 1])
                },
                config: PipelineConfig {
                    modalities: mods,
                    features,
                    ..base.clone()
                },
            }
        })
        .collect()
}

/// orig; +cluster_id; +stat.
pub fn ladder_anchor_features(base: &PipelineConfig) -> Vec<LadderStep> {
    use FeatureGroup::*;
    [
        ("orig", &[Orig][..]),
        ("+cluster_id", &[Orig, ClusterId][..]),
        ("+stat", &[Orig, ClusterId, Stat][..]),
    ]
    .into_iter()
    .map(|(label, groups)| LadderStep {
        label: label.into(),
        config: base.clone().with_features(groups),
    })
    .collect()
}

/// stat; +gen.
pub fn ladder_semantic(base: &PipelineConfig) -> Vec<LadderStep> {
    use FeatureGroup::*;
    [("stat", &[Stat][..]), ("+gen", &[Stat, Gen][..])]
        .into_iter()
        .map(|(label, groups)| LadderStep {
            label: label.into(),
            config: base.clone().with_features(groups),
        })
        .collect()
}
