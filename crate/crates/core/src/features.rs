//! Contextual features of a candidate given the items slotted above it.
//!
//! The contextual block has a fixed order that model files depend on:
//!
//! | slot | feature                                                        |
//! |------|----------------------------------------------------------------|
//! | f1   | dot(candidate, mean embedding of last k items)                 |
//! | f2-6 | dot(candidate, item m slots above), m = 1..5                   |
//! | f7   | mean of f2..f6 over the lags that exist                        |
//! | f8   | fraction of the previous min(k, 5) items sharing the topic     |
//! | f9   | 1.0 if the item directly above shares the topic                |
//! | f10  | slot index / feed length                                       |
//!
//! Missing context (empty prefix, lags past the prefix) takes the configured
//! fill value, 0.0 by default.

use serde::{Deserialize, Serialize};

use crate::domain::{dot, ContextualFeatureVector, DomainError, FeedContext, Item, UserProfile};

/// Number of lag slots in the contextual block.
pub const MAX_LAGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub context_depth: usize,
    pub missing_context_fill: f64,
    pub feed_length: usize,
    pub num_topics: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            context_depth: 5,
            missing_context_fill: 0.0,
            feed_length: 20,
            num_topics: 8,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.context_depth == 0 {
            return Err("features.context_depth must be >= 1".into());
        }
        if self.feed_length == 0 {
            return Err("features.feed_length must be >= 1".into());
        }
        if !self.missing_context_fill.is_finite() {
            return Err("features.missing_context_fill must be finite".into());
        }
        Ok(())
    }

    pub fn with_feed_length(self, feed_length: usize) -> Self {
        Self {
            feed_length,
            ..self
        }
    }
}

fn check_dim(candidate: &Item, other: &Item) -> Result<(), DomainError> {
    if candidate.embedding.len() != other.embedding.len() {
        return Err(DomainError::DimensionMismatch {
            what: other.id.clone(),
            expected: candidate.embedding.len(),
            actual: other.embedding.len(),
        });
    }
    Ok(())
}

/// Componentwise mean of the last `min(k, |prefix|)` embeddings. Not re-normalized.
///
/// Returns an empty vector when there is no context and the dimension is unknown;
/// use [`average_context_embedding_dim`] when a zero vector of fixed size is needed.
pub fn average_context_embedding(context: &FeedContext<'_>, k: usize) -> Vec<f64> {
    let dim = context
        .prefix()
        .first()
        .map(|i| i.embedding.len())
        .unwrap_or(0);
    average_context_embedding_dim(context, k, dim)
}

pub fn average_context_embedding_dim(context: &FeedContext<'_>, k: usize, dim: usize) -> Vec<f64> {
    let window = context.window(k);
    let mut mean = vec![0.0; dim];
    if window.is_empty() {
        return mean;
    }
    for item in window {
        for (m, x) in mean.iter_mut().zip(&item.embedding) {
            *m += x;
        }
    }
    let n = window.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Dot product of the candidate with the mean embedding of the last `k` items.
/// Zero for an empty context.
pub fn avg_similarity(candidate: &Item, context: &FeedContext<'_>, k: usize) -> Result<f64, DomainError> {
    let window = context.window(k);
    for item in window {
        check_dim(candidate, item)?;
    }
    if window.is_empty() {
        return Ok(0.0);
    }
    let mean = average_context_embedding_dim(context, k, candidate.embedding.len());
    Ok(dot(&candidate.embedding, &mean))
}

/// Per-lag similarities for lags `1..=k` plus their mean over the lags present.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSimilarities {
    pub by_lag: Vec<f64>,
    pub mean: f64,
    pub defined: usize,
}

pub fn pairwise_similarities(
    candidate: &Item,
    context: &FeedContext<'_>,
    k: usize,
    fill: f64,
) -> Result<PairwiseSimilarities, DomainError> {
    let mut by_lag = vec![fill; k];
    let mut defined = 0;
    let mut sum = 0.0;
    for (lag, slot) in (1..=k).zip(by_lag.iter_mut()) {
        if let Some(above) = context.lagged(lag) {
            check_dim(candidate, above)?;
            *slot = dot(&candidate.embedding, &above.embedding);
            sum += *slot;
            defined += 1;
        }
    }
    let mean = if defined == 0 { fill } else { sum / defined as f64 };
    Ok(PairwiseSimilarities {
        by_lag,
        mean,
        defined,
    })
}

/// Builds f1..f10 for `candidate` placed at `slot_index` below `context`.
pub fn extract_contextual(
    candidate: &Item,
    context: &FeedContext<'_>,
    slot_index: usize,
    cfg: &FeatureConfig,
) -> Result<ContextualFeatureVector, DomainError> {
    let k = cfg.context_depth;
    let fill = cfg.missing_context_fill;
    let mut f = [0.0; ContextualFeatureVector::LEN];

    f[0] = if context.window(k).is_empty() {
        fill
    } else {
        avg_similarity(candidate, context, k)?
    };

    let lags = pairwise_similarities(candidate, context, k.min(MAX_LAGS), fill)?;
    for lag in 0..MAX_LAGS {
        f[1 + lag] = lags.by_lag.get(lag).copied().unwrap_or(fill);
    }
    f[6] = lags.mean;

    let recent = context.window(k.min(MAX_LAGS));
    f[7] = if recent.is_empty() {
        fill
    } else {
        let shared = recent.iter().filter(|i| i.topic == candidate.topic).count();
        shared as f64 / recent.len() as f64
    };
    f[8] = match context.lagged(1) {
        Some(above) if above.topic == candidate.topic => 1.0,
        Some(_) => 0.0,
        None => fill,
    };
    f[9] = slot_index as f64 / cfg.feed_length.max(1) as f64;

    Ok(ContextualFeatureVector(f))
}

/// Width of the point-wise block for a given topic count.
pub fn pointwise_dim(num_topics: usize) -> usize {
    2 + num_topics
}

/// Point-wise inputs: user-item affinity, main-pass score, topic one-hot.
pub fn pointwise_features(
    user: &UserProfile,
    item: &Item,
    num_topics: usize,
) -> Result<Vec<f64>, DomainError> {
    if user.interest_embedding.len() != item.embedding.len() {
        return Err(DomainError::DimensionMismatch {
            what: item.id.clone(),
            expected: user.interest_embedding.len(),
            actual: item.embedding.len(),
        });
    }
    let topic = item.topic as usize;
    if topic >= num_topics {
        return Err(DomainError::DimensionMismatch {
            what: format!("topic of {}", item.id),
            expected: num_topics,
            actual: topic + 1,
        });
    }
    let mut out = Vec::with_capacity(pointwise_dim(num_topics));
    out.push(dot(&user.interest_embedding, &item.embedding));
    out.push(item.main_score);
    out.extend((0..num_topics).map(|t| if t == topic { 1.0 } else { 0.0 }));
    Ok(out)
}
