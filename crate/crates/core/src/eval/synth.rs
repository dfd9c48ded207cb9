//! Seeded synthetic posts with latent topics and a drifted test period.
//!
//! Every post belongs to one topic. Each semantic modality has its own topic
//! centroid, and a post's embedding is that centroid plus Gaussian noise.
//! Popularity is the topic's base level plus the author's quality offset plus
//! noise. The test period keeps the same users and topics but shifts topic
//! base levels and centroids in proportion to `drift`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalError, Result};
use crate::dataset::{write_embedding_matrix, write_metadata, Dataset, EmbeddingMatrix, Manifest, PostRecord};
use crate::modality::Modality;

const REGIONS: [&str; 4] = ["na", "eu", "apac", "latam"];

const WORDS: [&str; 60] = [
    "sunset",
    "guitar",
    "recipe",
    "puppy",
    "workout",
    "makeup",
    "soccer",
    "travel",
    "coffee",
    "gaming",
    "dance",
    "skincare",
    "beach",
    "anime",
    "pasta",
    "kitten",
    "yoga",
    "sneakers",
    "concert",
    "camping",
    "baking",
    "painting",
    "skateboard",
    "fishing",
    "garden",
    "cocktail",
    "podcast",
    "surfing",
    "hiking",
    "fashion",
    "comedy",
    "prank",
    "tutorial",
    "unboxing",
    "review",
    "wedding",
    "festival",
    "science",
    "history",
    "movie",
    "piano",
    "drums",
    "basketball",
    "tennis",
    "running",
    "cycling",
    "snow",
    "mountain",
    "city",
    "night",
    "street",
    "market",
    "vintage",
    "robot",
    "rocket",
    "ocean",
    "forest",
    "desert",
    "island",
    "castle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub posts_per_user: usize,
    pub test_posts_per_user: usize,
    pub n_topics: usize,
    pub text_dim: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub topic_base_mean: f64,
    /// Topic base levels are uniform on `mean ± spread`.
    pub topic_base_spread: f64,
    pub user_offset_std: f64,
    pub popularity_noise: f64,
    /// Per-dimension embedding noise around the topic centroid.
    pub embed_noise: f64,
    /// In `[0, 1]`; scales both test-period shifts below.
    pub drift: f64,
    /// Std of the test-period topic base shift at `drift = 1`.
    pub drift_shift: f64,
    /// Per-dimension std of the test-period centroid jitter at `drift = 1`.
    pub drift_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 50,
            posts_per_user: 20,
            test_posts_per_user: 10,
            n_topics: 20,
            text_dim: 64,
            video_dim: 32,
            audio_dim: 32,
            topic_base_mean: 6.0,
            topic_base_spread: 2.0,
            user_offset_std: 0.5,
            popularity_noise: 0.3,
            embed_noise: 1.0,
            drift: 0.4,
            drift_shift: 1.0,
            drift_jitter: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::Spec(m));
        if !(0.0..=1.0).contains(&self.drift) {
            return bad(format!("drift must be in [0, 1], got {}", self.drift));
        }
        if self.n_topics == 0 {
            return bad("n_topics must be at least 1".into());
        }
        if self.n_users == 0 || self.posts_per_user == 0 || self.test_posts_per_user == 0 {
            return bad("n_users, posts_per_user and test_posts_per_user must be at least 1".into());
        }
        if self.text_dim == 0 || self.video_dim == 0 || self.audio_dim == 0 {
            return bad("embedding dimensions must be at least 1".into());
        }
        for (name, v) in [
            ("topic_base_spread", self.topic_base_spread),
            ("user_offset_std", self.user_offset_std),
            ("popularity_noise", self.popularity_noise),
            ("embed_noise", self.embed_noise),
            ("drift_shift", self.drift_shift),
            ("drift_jitter", self.drift_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.topic_base_mean.is_finite() {
            return bad("topic_base_mean must be finite".into());
        }
        Ok(())
    }

    fn dims(&self) -> [(Modality, usize); 3] {
        [
            (Modality::Text, self.text_dim),
            (Modality::Video, self.video_dim),
            (Modality::Audio, self.audio_dim),
        ]
    }
}

/// Generated data plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub train_topics: Vec<usize>,
    pub test_topics: Vec<usize>,
    pub topic_base: Vec<f64>,
    pub test_topic_base: Vec<f64>,
    pub user_offset: Vec<f64>,
    /// Per semantic modality, `n_topics` centroids for each period.
    pub centroids: BTreeMap<Modality, Vec<Vec<f64>>>,
    pub test_centroids: BTreeMap<Modality, Vec<Vec<f64>>>,
}

impl SynthData {
    /// Noise-free test targets: drifted topic base plus user offset.
    pub fn oracle_test_predictions(&self) -> Vec<f64> {
        let per_user = self.spec.test_posts_per_user;
        self.test_topics
            .iter()
            .enumerate()
            .map(|(i, &t)| self.test_topic_base[t] + self.user_offset[i / per_user])
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn f32_exact(x: f64) -> f64 {
    f64::from(x as f32)
}

struct User {
    id: String,
    offset: f64,
    followers: f64,
    account_age_days: f64,
    region: &'static str,
}

#[allow(clippy::too_many_arguments)]
fn posts(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    users: &[User],
    per_user: usize,
    id_prefix: &str,
    base: &[f64],
    centroids: &BTreeMap<Modality, Vec<Vec<f64>>>,
    topic_words: &[Vec<&'static str>],
) -> Result<(Dataset, Vec<usize>)> {
    let mut records = Vec::new();
    let mut topics = Vec::new();
    let mut data: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
    let mut post_rows = Vec::new();
    let mut user_rows = Vec::new();
    for user in users {
        for _ in 0..per_user {
            let t = rng.random_range(0..spec.n_topics);
            for (m, _) in spec.dims() {
                let buf = data.entry(m).or_default();
                for &c in &centroids[&m][t] {
                    buf.push(f32_exact(c + spec.embed_noise * normal(rng)));
                }
            }
            let popularity = base[t] + user.offset + spec.popularity_noise * normal(rng);
            let mut caption: Vec<&str> = (0..4).map(|_| topic_words[t][rng.random_range(0..5)]).collect();
            caption.push(WORDS[rng.random_range(0..WORDS.len())]);
            let duration = f32_exact(rng.random_range(5.0..120.0f64).round());
            let hour = f32_exact(rng.random_range(0..24u32).into());
            post_rows.extend([duration, hour]);
            user_rows.extend([user.followers, user.account_age_days]);
            records.push(PostRecord {
                post_id: format!("{id_prefix}{:05}", records.len()),
                user_id: user.id.clone(),
                popularity,
                user_meta: BTreeMap::from([
                    ("followers".into(), json!(user.followers)),
                    ("account_age_days".into(), json!(user.account_age_days)),
                    ("region".into(), json!(user.region)),
                ]),
                post_meta: BTreeMap::from([
                    ("caption".into(), json!(caption.join(" "))),
                    ("duration_s".into(), json!(duration)),
                    ("hour".into(), json!(hour)),
                ]),
            });
            topics.push(t);
        }
    }
    let n = records.len();
    let mut matrices = BTreeMap::new();
    for (m, d) in spec.dims() {
        matrices.insert(m, EmbeddingMatrix::new(m, n, d, data.remove(&m).unwrap_or_default())?);
    }
    matrices.insert(Modality::User, EmbeddingMatrix::new(Modality::User, n, 2, user_rows)?);
    matrices.insert(Modality::Post, EmbeddingMatrix::new(Modality::Post, n, 2, post_rows)?);
    Ok((Dataset::new(records, matrices)?, topics))
}

/// Generates the training period and the drifted test period. Fully
/// determined by `spec` (including its seed). Embedding and metadata values
/// are rounded to `f32` so the data survives an AMCF round trip unchanged.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let topic_base: Vec<f64> = (0..spec.n_topics)
        .map(|_| spec.topic_base_mean + spec.topic_base_spread * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut centroids = BTreeMap::new();
    for (m, d) in spec.dims() {
        let c: Vec<Vec<f64>> = (0..spec.n_topics)
            .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
            .collect();
        centroids.insert(m, c);
    }
    let topic_words: Vec<Vec<&str>> = (0..spec.n_topics)
        .map(|t| (0..5).map(|j| WORDS[(5 * t + j) % WORDS.len()]).collect())
        .collect();
    let users: Vec<User> = (0..spec.n_users)
        .map(|u| {
            let offset = spec.user_offset_std * normal(&mut rng);
            User {
                id: format!("u{u:03}"),
                offset,
                followers: f32_exact((1000.0 * (offset + 0.2 * normal(&mut rng)).exp()).round()),
                account_age_days: f32_exact(rng.random_range(30.0..3000.0f64).round()),
                region: REGIONS[rng.random_range(0..REGIONS.len())],
            }
        })
        .collect();

    let amount = spec.drift;
    let test_topic_base: Vec<f64> = topic_base
        .iter()
        .map(|b| b + amount * spec.drift_shift * normal(&mut rng))
        .collect();
    let mut test_centroids = BTreeMap::new();
    for (m, c) in &centroids {
        let shifted: Vec<Vec<f64>> = c
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v + amount * spec.drift_jitter * normal(&mut rng))
                    .collect()
            })
            .collect();
        test_centroids.insert(*m, shifted);
    }

    let (train, train_topics) = posts(
        spec,
        &mut rng,
        &users,
        spec.posts_per_user,
        "p",
        &topic_base,
        &centroids,
        &topic_words,
    )?;
    let (test, test_topics) = posts(
        spec,
        &mut rng,
        &users,
        spec.test_posts_per_user,
        "t",
        &test_topic_base,
        &test_centroids,
        &topic_words,
    )?;

    Ok(SynthData {
        spec: spec.clone(),
        train,
        test,
        train_topics,
        test_topics,
        topic_base,
        test_topic_base,
        user_offset: users.iter().map(|u| u.offset).collect(),
        centroids,
        test_centroids,
    })
}

fn write_period(ds: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    let meta = format!("{stem}.jsonl");
    write_metadata(ds.records(), dir.join(&meta), "popularity")?;
    let mut modalities = BTreeMap::new();
    for (m, matrix) in ds.matrices() {
        let file = format!("{stem}_{m}.amcf");
        write_embedding_matrix(matrix, dir.join(&file))?;
        modalities.insert(*m, PathBuf::from(file));
    }
    let manifest = Manifest {
        metadata_path: PathBuf::from(meta),
        target_field: "popularity".into(),
        modalities,
        metadata_schema: Default::default(),
        base_dir: dir.to_path_buf(),
    };
    let name = if stem == "train" {
        "manifest.json".to_string()
    } else {
        format!("{stem}_manifest.json")
    };
    let path = dir.join(name);
    manifest.write(&path)?;
    Ok(path)
}

/// Writes `manifest.json` (training period) and `test_manifest.json` plus
/// their metadata and matrix files into `dir`. Returns both manifest paths.
pub fn write_synthetic(data: &SynthData, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let train = write_period(&data.train, dir, "train")?;
    let test = write_period(&data.test, dir, "test")?;
    Ok((train, test))
}
