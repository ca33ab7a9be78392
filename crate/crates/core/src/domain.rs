//! Core data types: items, users, feeds, feed context and logged impressions.
//!
//! Embeddings are unit-normalized at ingestion so that a dot product between
//! two items is their cosine similarity, bounded in `[-1, 1]`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Accepted distance of an embedding's norm from 1 before re-normalization.
pub const NORM_REPAIR_TOLERANCE: f64 = 1e-3;

/// Required distance of a stored embedding's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("degenerate embedding for {0}: cannot normalize")]
    DegenerateEmbedding(String),
    #[error("embedding for {id} has norm {norm}, too far from unit length")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("main_score {score} of {id} outside [0, 1]")]
    ScoreOutOfRange { id: String, score: f64 },
    #[error("feed is empty")]
    EmptyFeed,
    #[error("dimension must be positive")]
    ZeroDimension,
}

/// One rankable item: embedding, topic and the point-wise main-pass score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub embedding: Vec<f64>,
    pub topic: u32,
    pub main_score: f64,
}

impl Item {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>, topic: u32, main_score: f64) -> Self {
        Self {
            id: id.into(),
            embedding,
            topic,
            main_score,
        }
    }
}

/// A user as seen by the serving path plus the simulator-only fatigue
/// sensitivity.
///
/// `diversity_sensitivity` is ground truth for the synthetic world. It is
/// private to the crate: the scorer, feature extractor and reranker never
/// read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    pub interest_embedding: Vec<f64>,
    #[serde(default)]
    pub(crate) diversity_sensitivity: f64,
}

impl UserProfile {
    pub fn new(id: impl Into<String>, interest_embedding: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            interest_embedding,
            diversity_sensitivity: 0.0,
        }
    }

    /// Ground-truth fatigue coefficient. Only meaningful for simulated users.
    pub fn with_diversity_sensitivity(mut self, beta: f64) -> Self {
        self.diversity_sensitivity = beta;
        self
    }

    pub fn diversity_sensitivity(&self) -> f64 {
        self.diversity_sensitivity
    }

    /// Copy of the profile with ground truth stripped, as handed to serving code.
    pub fn serving_view(&self) -> Self {
        Self {
            id: self.id.clone(),
            interest_embedding: self.interest_embedding.clone(),
            diversity_sensitivity: 0.0,
        }
    }

    pub fn validate(&self, dimension: usize) -> Result<Self, DomainError> {
        let embedding = normalize_checked(&self.id, &self.interest_embedding, dimension)?;
        Ok(Self {
            interest_embedding: embedding,
            ..self.clone()
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize_checked(id: &str, embedding: &[f64], dimension: usize) -> Result<Vec<f64>, DomainError> {
    if embedding.len() != dimension {
        return Err(DomainError::DimensionMismatch {
            what: id.to_string(),
            expected: dimension,
            actual: embedding.len(),
        });
    }
    let norm = l2_norm(embedding);
    if !norm.is_finite() || norm == 0.0 {
        return Err(DomainError::DegenerateEmbedding(id.to_string()));
    }
    if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
        // already unit; keep the exact bits so re-validation is idempotent
        return Ok(embedding.to_vec());
    }
    if (norm - 1.0).abs() > NORM_REPAIR_TOLERANCE {
        return Err(DomainError::NotUnitNorm {
            id: id.to_string(),
            norm,
        });
    }
    Ok(embedding.iter().map(|x| x / norm).collect())
}

/// Scales a vector to unit length. Returns `None` for the zero vector.
pub fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        None
    } else {
        Some(v.iter().map(|x| x / norm).collect())
    }
}

/// Validates a list of items against the corpus dimension.
///
/// Embeddings within `1e-3` of unit norm are re-normalized; anything further
/// out is rejected. Validating an already validated corpus returns it
/// unchanged.
pub fn validate_corpus(items: &[Item], dimension: usize) -> Result<Vec<Item>, DomainError> {
    if dimension == 0 {
        return Err(DomainError::ZeroDimension);
    }
    let mut seen = HashSet::with_capacity(items.len());
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(DomainError::DuplicateId(item.id.clone()));
        }
        let embedding = normalize_checked(&item.id, &item.embedding, dimension)?;
        if !(0.0..=1.0).contains(&item.main_score) {
            return Err(DomainError::ScoreOutOfRange {
                id: item.id.clone(),
                score: item.main_score,
            });
        }
        out.push(Item {
            embedding,
            ..item.clone()
        });
    }
    Ok(out)
}

/// Candidates for one user, in descending main-pass score order.
#[derive(Debug, Clone, PartialEq)]
pub struct Feed {
    user: UserProfile,
    items: Vec<Item>,
}

impl Feed {
    /// Builds a feed, ordering items by descending `main_score` (stable).
    pub fn new(user: UserProfile, mut items: Vec<Item>) -> Result<Self, DomainError> {
        if items.is_empty() {
            return Err(DomainError::EmptyFeed);
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(DomainError::DuplicateId(item.id.clone()));
            }
        }
        items.sort_by(|a, b| b.main_score.total_cmp(&a.main_score));
        Ok(Self { user, items })
    }

    pub fn user(&self) -> &UserProfile {
        &self.user
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn into_parts(self) -> (UserProfile, Vec<Item>) {
        (self.user, self.items)
    }
}

/// The items already placed above the current slot, most recent last.
#[derive(Debug, Clone, Copy)]
pub struct FeedContext<'a> {
    prefix: &'a [Item],
    capacity: usize,
}

impl<'a> FeedContext<'a> {
    pub fn new(prefix: &'a [Item], capacity: usize) -> Self {
        Self {
            prefix,
            capacity: capacity.max(1),
        }
    }

    pub fn empty() -> FeedContext<'static> {
        FeedContext {
            prefix: &[],
            capacity: 1,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn prefix(&self) -> &'a [Item] {
        self.prefix
    }

    /// The last `min(capacity, n)` items of the prefix.
    pub fn window(&self, n: usize) -> &'a [Item] {
        let take = n.min(self.capacity).min(self.prefix.len());
        &self.prefix[self.prefix.len() - take..]
    }

    /// Item `lag` slots above the current one (`lag >= 1`), if within capacity.
    pub fn lagged(&self, lag: usize) -> Option<&'a Item> {
        if lag == 0 || lag > self.capacity || lag > self.prefix.len() {
            None
        } else {
            Some(&self.prefix[self.prefix.len() - lag])
        }
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }
}

/// Fixed-width block of contextual features, in contract order f1..f10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextualFeatureVector(pub [f64; ContextualFeatureVector::LEN]);

impl ContextualFeatureVector {
    pub const LEN: usize = 10;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn avg_embedding_similarity(&self) -> f64 {
        self.0[0]
    }

    /// Similarity to the item `lag` slots above (1..=5).
    pub fn lag_similarity(&self, lag: usize) -> f64 {
        assert!((1..=5).contains(&lag), "lag must be in 1..=5");
        self.0[lag]
    }

    pub fn mean_pairwise_similarity(&self) -> f64 {
        self.0[6]
    }

    pub fn topic_overlap_fraction(&self) -> f64 {
        self.0[7]
    }

    pub fn immediate_topic_repeat(&self) -> f64 {
        self.0[8]
    }

    pub fn normalized_position(&self) -> f64 {
        self.0[9]
    }
}

impl Default for ContextualFeatureVector {
    fn default() -> Self {
        Self([0.0; Self::LEN])
    }
}

/// One logged (user, item, position) exposure with its engagement labels.
///
/// Carries no ground-truth quantities of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub session_id: u64,
    pub day: u32,
    pub user_id: String,
    pub item_id: String,
    pub position: u32,
    pub pointwise: Vec<f64>,
    pub contextual: ContextualFeatureVector,
    pub labels: Vec<u8>,
    pub similarity_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub dimension: usize,
    pub task_count: usize,
    pub context_depth: usize,
    pub num_topics: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LogError {
    #[error("impression {index} has {actual} labels, expected {expected}")]
    LabelCount {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("session {session} positions are not contiguous from 0")]
    PositionGap { session: u64 },
    #[error("task count must be at least 1")]
    NoTasks,
}

/// Impressions grouped by session, in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub metadata: LogMetadata,
    pub impressions: Vec<Impression>,
}

impl SessionLog {
    pub fn new(metadata: LogMetadata, impressions: Vec<Impression>) -> Result<Self, LogError> {
        if metadata.task_count == 0 {
            return Err(LogError::NoTasks);
        }
        let mut expected_next: Option<(u64, u32)> = None;
        for (index, imp) in impressions.iter().enumerate() {
            if imp.labels.len() != metadata.task_count {
                return Err(LogError::LabelCount {
                    index,
                    expected: metadata.task_count,
                    actual: imp.labels.len(),
                });
            }
            let expected_pos = match expected_next {
                Some((session, next)) if session == imp.session_id => next,
                _ => 0,
            };
            if imp.position != expected_pos {
                return Err(LogError::PositionGap {
                    session: imp.session_id,
                });
            }
            expected_next = Some((imp.session_id, imp.position + 1));
        }
        Ok(Self {
            metadata,
            impressions,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    /// Distinct day tags in ascending order.
    pub fn days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self.impressions.iter().map(|i| i.day).collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    /// Impressions whose day satisfies the predicate, keeping log order.
    pub fn filter_days(&self, keep: impl Fn(u32) -> bool) -> SessionLog {
        SessionLog {
            metadata: self.metadata,
            impressions: self
                .impressions
                .iter()
                .filter(|i| keep(i.day))
                .cloned()
                .collect(),
        }
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (topic {}, score {:.4})", self.id, self.topic, self.main_score)
    }
}
