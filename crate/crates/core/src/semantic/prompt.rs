//! Cluster digests and prompt templates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SemanticError;
use crate::clustering::{ClusterModel, LabelVector};
use crate::dataset::Dataset;
use crate::modality::Modality;

pub const DEFAULT_EXEMPLARS: usize = 8;
const CONTENT_SLOT: &str = "{cluster_content}";

/// The fixed category list used by the category prompt.
pub const CATEGORIES: [&str; 21] = [
    "Dance",
    "Comedy",
    "Lip Sync",
    "Tutorial",
    "Beauty & Fashion",
    "Fitness",
    "Food & Drink",
    "Pets & Animals",
    "Vlogging",
    "Challenges",
    "Memes",
    "Technology",
    "Travel",
    "Motivation & Inspiration",
    "Art & Creativity",
    "Sports",
    "Music",
    "Social Issues",
    "Unboxing",
    "Pranks",
    "Others",
];

pub const MBTI_TYPES: [&str; 16] = [
    "INTJ", "INTP", "ENTJ", "ENTP", "INFJ", "INFP", "ENFJ", "ENFP", "ISTJ", "ISFJ", "ESTJ", "ESFJ", "ISTP", "ISFP",
    "ESTP", "ESFP",
];

/// Analysis requested from the LLM for a cluster. Declaration order is the
/// order responses are concatenated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTask {
    Theme,
    Category,
    Audience,
    Mbti,
    Summary,
}

impl PromptTask {
    pub const ALL: [PromptTask; 5] = [
        PromptTask::Theme,
        PromptTask::Category,
        PromptTask::Audience,
        PromptTask::Mbti,
        PromptTask::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTask::Theme => "theme",
            PromptTask::Category => "category",
            PromptTask::Audience => "audience",
            PromptTask::Mbti => "mbti",
            PromptTask::Summary => "summary",
        }
    }
}

impl fmt::Display for PromptTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptTask {
    type Err = SemanticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| SemanticError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: PromptTask,
    /// Text containing one `{cluster_content}` slot.
    pub text: String,
}

impl PromptTemplate {
    pub fn builtin(task: PromptTask) -> Self {
        let text = match task {
            PromptTask::Theme => "What is the primary theme of this cluster? The short videos below were grouped \
                 together by their content.\n\n{cluster_content}\n\nDescribe the shared theme in one or two \
                 sentences."
                .to_string(),
            PromptTask::Summary => "Provide a short description for this video. The cluster below groups similar \
                 videos; describe what they have in common.\n\n{cluster_content}"
                .to_string(),
            PromptTask::Category => format!(
                "Based on the content of this TikTok video, determine its category from the following list: \
                 {}, and {}. The cluster below groups similar videos; answer for the cluster as a whole.\n\n\
                 {CONTENT_SLOT}",
                CATEGORIES[..20].join(", "),
                CATEGORIES[20]
            ),
            PromptTask::Audience => "Based on the content, style, and context of the video, identify the most likely \
                 target audience by describing:\n\
                 - Age group(s) that would be interested.\n\
                 - Interests or hobbies relevant to the video.\n\
                 - Geographic or cultural background if identifiable.\n\
                 - Reasons or clues from the video that support your audience inference.\n\n\
                 Please provide your answer as brief bullet points.\n\n{cluster_content}"
                .to_string(),
            PromptTask::Mbti => "You are a professional MBTI personality analyst. Based on the following text, \
                 internally analyze the author's likely MBTI type by evaluating each of the four dimensions \
                 (Extraversion vs. Introversion, Sensing vs. Intuition, Thinking vs. Feeling, Judging vs. \
                 Perceiving).\n\n\
                 For your internal reasoning, consider the following:\n\
                 - E vs I: Focus on energy orientation (social engagement vs. introspection), tone (outward or \
                 inward focus), and mention of interactions with others.\n\
                 - S vs N: Look for language about concrete facts vs. abstract ideas, detail orientation vs. \
                 pattern-seeking or imaginative content.\n\
                 - T vs F: Note decision-making language - whether it emphasizes logic/criteria (T) or \
                 values/emotions (F).\n\
                 - J vs P: Pay attention to structure, organization, planning (J) vs. spontaneity, flexibility, \
                 or openness (P).\n\n\
                 {cluster_content}\n\n\
                 Based on your assessment of all four axes, output only the most likely MBTI type (e.g., INFP, \
                 ESTJ)."
                .to_string(),
        };
        Self { task, text }
    }

    pub fn new(task: PromptTask, text: impl Into<String>) -> Result<Self, SemanticError> {
        let text = text.into();
        if !text.contains(CONTENT_SLOT) {
            return Err(SemanticError::Template(format!(
                "template for {task} lacks the {CONTENT_SLOT} slot"
            )));
        }
        Ok(Self { task, text })
    }
}

/// What the LLM sees of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDigest {
    pub modality: Modality,
    pub cluster: usize,
    /// Member count in the training rows.
    pub size: usize,
    /// Texts of the members nearest the centroid, nearest first.
    pub exemplars: Vec<String>,
    /// Mean squared distance of members to the centroid.
    pub mean_sq_distance: f64,
}

/// Digests of every populated cluster, in cluster order. `dataset` must be
/// the rows `labels` was computed on.
pub fn build_cluster_digests(
    dataset: &Dataset,
    model: &ClusterModel,
    labels: &LabelVector,
    max_exemplars: usize,
    text_fields: &[String],
) -> Result<Vec<ClusterDigest>, SemanticError> {
    let raw = dataset
        .matrix(model.modality)
        .ok_or(SemanticError::MissingModality(model.modality))?;
    if raw.n_rows() != labels.len() {
        return Err(SemanticError::Misaligned);
    }
    let space = model
        .preprocessing
        .apply(raw)
        .map_err(|e| SemanticError::Cluster(e.into()))?;
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); model.k];
    for (i, &l) in labels.labels.iter().enumerate() {
        let c = model.centroids.get(l).ok_or(SemanticError::Misaligned)?;
        let d: f64 = space.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        members[l].push((d, i));
    }
    let records = dataset.records();
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(cluster, mut m)| {
            let size = m.len();
            let mean_sq_distance = m.iter().map(|(d, _)| d).sum::<f64>() / size as f64;
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let exemplars = m
                .iter()
                .take(max_exemplars.max(1))
                .map(|&(_, i)| {
                    let t = records[i].text_fields(text_fields);
                    if t.is_empty() {
                        format!("post {}", records[i].post_id)
                    } else {
                        t
                    }
                })
                .collect();
            ClusterDigest {
                modality: model.modality,
                cluster,
                size,
                exemplars,
                mean_sq_distance,
            }
        })
        .collect())
}

/// Digest of one cluster; see [`build_cluster_digests`].
pub fn build_cluster_digest(
    dataset: &Dataset,
    model: &ClusterModel,
    labels: &LabelVector,
    cluster: usize,
    max_exemplars: usize,
    text_fields: &[String],
) -> Result<ClusterDigest, SemanticError> {
    build_cluster_digests(dataset, model, labels, max_exemplars, text_fields)?
        .into_iter()
        .find(|d| d.cluster == cluster)
        .ok_or(SemanticError::EmptyCluster {
            modality: model.modality,
            cluster,
        })
}

pub fn render_prompt(template: &PromptTemplate, digest: &ClusterDigest) -> String {
    let mut content = format!(
        "Cluster {} ({} modality, {} posts). Representative posts:\n",
        digest.cluster, digest.modality, digest.size
    );
    for (i, e) in digest.exemplars.iter().enumerate() {
        content.push_str(&format!("{}. {}\n", i + 1, e.replace('\n', " ")));
    }
    template.text.replace(CONTENT_SLOT, content.trim_end())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(exemplars: &[&str]) -> ClusterDigest {
        ClusterDigest {
            modality: Modality::Text,
            cluster: 4,
            size: exemplars.len(),
            exemplars: exemplars.iter().map(|s| s.to_string()).collect(),
            mean_sq_distance: 0.0,
        }
    }

    #[test]
    fn theme_prompt_lists_exemplars_in_order() {
        let p = render_prompt(
            &PromptTemplate::builtin(PromptTask::Theme),
            &digest(&["cats on skis", "dogs surfing"]),
        );
        let a = p.find("1. cats on skis").unwrap();
        let b = p.find("2. dogs surfing").unwrap();
        assert!(a < b);
        assert!(!p.contains(CONTENT_SLOT));
    }

    #[test]
    fn category_prompt_has_all_categories() {
        let p = render_prompt(&PromptTemplate::builtin(PromptTask::Category), &digest(&["x"]));
        assert!(p.contains("Dance, Comedy, Lip Sync, Tutorial"));
        for c in CATEGORIES {
            assert!(p.contains(c), "missing {c}");
        }
        assert!(p.contains("Unboxing, Pranks, and Others"));
    }

    #[test]
    fn mbti_prompt_ends_with_type_only_instruction() {
        let p = render_prompt(&PromptTemplate::builtin(PromptTask::Mbti), &digest(&["x"]));
        assert!(p.ends_with("output only the most likely MBTI type (e.g., INFP, ESTJ)."));
    }

    #[test]
    fn rendering_is_deterministic() {
        let d = digest(&["a", "b", "c"]);
        for t in PromptTask::ALL {
            let tpl = PromptTemplate::builtin(t);
            assert_eq!(render_prompt(&tpl, &d), render_prompt(&tpl, &d));
            assert!(!render_prompt(&tpl, &d).is_empty());
        }
    }

    #[test]
    fn custom_template_needs_slot() {
        assert!(PromptTemplate::new(PromptTask::Theme, "no slot").is_err());
        let t = PromptTemplate::new(PromptTask::Theme, "Look: {cluster_content}").unwrap();
        assert!(render_prompt(&t, &digest(&["q"])).starts_with("Look: Cluster 4"));
    }

    #[test]
    fn task_parse() {
        assert_eq!("MBTI".parse::<PromptTask>().unwrap(), PromptTask::Mbti);
        assert!("vibes".parse::<PromptTask>().is_err());
    }
}
