//! Anchored multi-modal clustering and feature generation for popularity
//! regression under temporal drift.
//!
//! The pipeline clusters each modality of a post (text, video, audio, user
//! metadata, post metadata), attaches training-fold popularity statistics of
//! each cluster as *statistical anchors*, attaches embeddings of LLM-written
//! cluster descriptions as *semantic anchors*, fuses both with the raw
//! features and fits an L1 gradient-boosted tree ensemble. The [`eval`]
//! module wraps all of it in a group k-fold harness with ablation and k-sweep
//! runners and a synthetic drift generator.

pub mod anchors;
pub mod clustering;
pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod gbdt;
pub mod modality;
pub mod preprocess;
pub mod semantic;

mod util;

pub use dataset::{Dataset, EmbeddingMatrix, PostRecord};
pub use modality::Modality;
