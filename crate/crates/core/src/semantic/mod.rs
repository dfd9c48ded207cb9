//! Semantic anchors: LLM-written descriptions of each text/video/audio
//! cluster, embedded and attached to every member post.

pub mod embed;
pub mod llm;
pub mod prompt;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterError, ClusterModel, LabelVector};
use crate::dataset::Dataset;
use crate::fusion::FeatureBlock;
use crate::modality::Modality;

pub use embed::{embed_text, HashingEmbedder, RemoteEmbedder, TextEmbedder, DEFAULT_EMBED_DIM};
pub use llm::{query_llm, CachedLlm, HttpLlm, LlmClient, LlmClientConfig, LlmError, ResponseCache, StubLlm};
pub use prompt::{
    build_cluster_digest, build_cluster_digests, render_prompt, ClusterDigest, PromptTask, PromptTemplate, CATEGORIES,
    DEFAULT_EXEMPLARS, MBTI_TYPES,
};

#[derive(Debug, thiserror::Error)]
pub enum SemanticError {
    #[error("cluster {cluster} of {modality} has no training members")]
    EmptyCluster { modality: Modality, cluster: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("modality {0} missing")]
    MissingModality(Modality),
    #[error("labels and rows are misaligned")]
    Misaligned,
    #[error("unknown prompt task `{0}`")]
    UnknownTask(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("embedding request failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticOptions {
    /// Responses are concatenated in [`PromptTask`] order regardless of the
    /// order given here.
    pub tasks: Vec<PromptTask>,
    pub exemplars: usize,
    /// `post_meta` string fields used as exemplar text.
    pub text_fields: Vec<String>,
    /// Encode the MBTI answer as a 16-way one-hot appended to the embedding
    /// instead of embedding it as text.
    pub mbti_one_hot: bool,
    /// Upper bound on concurrently outstanding LLM requests.
    pub max_in_flight: usize,
}

impl Default for SemanticOptions {
    fn default() -> Self {
        Self {
            tasks: vec![PromptTask::Theme, PromptTask::Mbti, PromptTask::Summary],
            exemplars: DEFAULT_EXEMPLARS,
            text_fields: vec!["caption".into(), "description".into(), "post_content".into()],
            mbti_one_hot: false,
            max_in_flight: 4,
        }
    }
}

impl SemanticOptions {
    fn ordered_tasks(&self) -> Vec<PromptTask> {
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEntry {
    pub description: String,
    pub embedding: Vec<f64>,
}

/// Per modality, one optional entry per cluster index (`None` for clusters
/// without training members).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    pub embed_dim: usize,
    pub entries: BTreeMap<Modality, Vec<Option<SemanticEntry>>>,
}

impl SemanticTable {
    pub fn embedding(&self, modality: Modality, cluster: usize) -> Option<&[f64]> {
        self.entries
            .get(&modality)?
            .get(cluster)?
            .as_ref()
            .map(|e| e.embedding.as_slice())
    }
}

fn mbti_one_hot(answer: &str) -> Vec<f64> {
    let upper = answer.to_uppercase();
    let hit = MBTI_TYPES
        .iter()
        .position(|t| upper.split(|c: char| !c.is_ascii_alphabetic()).any(|tok| tok == *t));
    (0..MBTI_TYPES.len())
        .map(|i| if Some(i) == hit { 1.0 } else { 0.0 })
        .collect()
}

/// Queries the LLM for every populated cluster of each semantic modality in
/// `models` and embeds the concatenated answers. `dataset` and `labels` must
/// be the training rows the models were fitted on.
pub fn fit_semantic_table(
    dataset: &Dataset,
    models: &BTreeMap<Modality, ClusterModel>,
    labels: &BTreeMap<Modality, LabelVector>,
    client: &dyn LlmClient,
    embedder: &dyn TextEmbedder,
    options: &SemanticOptions,
) -> Result<SemanticTable, SemanticError> {
    let tasks = options.ordered_tasks();
    let templates: Vec<PromptTemplate> = tasks.iter().map(|&t| PromptTemplate::builtin(t)).collect();
    let embed_dim = embedder.dim() + if options.mbti_one_hot { MBTI_TYPES.len() } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.max_in_flight.max(1))
        .build()
        .expect("thread pool");

    let mut entries = BTreeMap::new();
    for (&m, model) in models.iter().filter(|(m, _)| m.is_semantic()) {
        let lv = labels.get(&m).ok_or(SemanticError::MissingModality(m))?;
        let digests = build_cluster_digests(dataset, model, lv, options.exemplars, &options.text_fields)?;
        let built: Vec<Result<(usize, SemanticEntry), SemanticError>> = pool.install(|| {
            digests
                .par_iter()
                .map(|d| {
                    let mut texts = Vec::with_capacity(templates.len());
                    let mut one_hot = None;
                    for tpl in &templates {
                        let answer = client.complete(&render_prompt(tpl, d))?;
                        if options.mbti_one_hot && tpl.task == PromptTask::Mbti {
                            one_hot = Some(mbti_one_hot(&answer));
                        } else {
                            texts.push(answer.trim().to_string());
                        }
                    }
                    let description = texts.join("\n");
                    let mut embedding = if description.trim().is_empty() {
                        vec![0.0; embedder.dim()]
                    } else {
                        embedder.embed(&description)?
                    };
                    if options.mbti_one_hot {
                        embedding.extend(one_hot.unwrap_or_else(|| vec![0.0; MBTI_TYPES.len()]));
                    }
                    Ok((d.cluster, SemanticEntry { description, embedding }))
                })
                .collect()
        });
        let mut slots: Vec<Option<SemanticEntry>> = vec![None; model.k];
        for r in built {
            let (j, e) = r?;
            slots[j] = Some(e);
        }
        entries.insert(m, slots);
    }
    Ok(SemanticTable { embed_dim, entries })
}

/// For each row, the cluster embeddings of its text, video and audio labels
/// (whichever are in `labels_by_modality`), concatenated in that order.
/// Unpopulated clusters contribute zeros.
pub fn lookup_semantic_features(
    labels_by_modality: &BTreeMap<Modality, LabelVector>,
    table: &SemanticTable,
) -> Result<FeatureBlock, SemanticError> {
    let sem: Vec<(&Modality, &LabelVector)> = labels_by_modality.iter().filter(|(m, _)| m.is_semantic()).collect();
    let n = labels_by_modality.values().next().map_or(0, LabelVector::len);
    if sem.iter().any(|(_, l)| l.len() != n) {
        return Err(SemanticError::Misaligned);
    }
    let mut names = Vec::with_capacity(sem.len() * table.embed_dim);
    for (m, _) in &sem {
        if !table.entries.contains_key(m) {
            return Err(SemanticError::MissingModality(**m));
        }
        names.extend((0..table.embed_dim).map(|j| format!("{m}_gen_{j}")));
    }
    let zeros = vec![0.0; table.embed_dim];
    let mut data = Vec::with_capacity(n * names.len());
    for i in 0..n {
        for (m, lv) in &sem {
            data.extend_from_slice(table.embedding(**m, lv.labels[i]).unwrap_or(&zeros));
        }
    }
    Ok(FeatureBlock::new(n, names, data))
}
