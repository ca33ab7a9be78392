//! The contextual pass: greedy slot-by-slot re-ranking, its paginated
//! (demand-based) form, and an MMR comparator.
//!
//! At each output slot the first `w` still-unslotted candidates, in main-pass
//! order, are scored with contextual features built from the items already
//! slotted. The best one by the objective task takes the slot; ties go to the
//! candidate with the better main-pass rank. A full feed of `K` items costs at
//! most `K * w` scorer calls.

use serde::{Deserialize, Serialize};

use crate::domain::{dot, DomainError, Feed, FeedContext, Item, UserProfile};
use crate::features::{extract_contextual, pointwise_features, FeatureConfig};
use crate::model::{FeatureMode, ModelError, Scorer};

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("feed is empty")]
    EmptyFeed,
    #[error("scorer is in {0} mode, contextual mode required")]
    ModeMismatch(FeatureMode),
    #[error("objective task {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("session has no remaining candidates")]
    SessionExhausted,
    #[error("invalid rerank params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankParams {
    /// Candidates scored per slot.
    pub window: usize,
    pub context_depth: usize,
    pub page_size: usize,
    pub objective_task: usize,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            window: 10,
            context_depth: 5,
            page_size: 10,
            objective_task: 0,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.window == 0 {
            return Err(RerankError::InvalidParams("window must be >= 1".into()));
        }
        if self.context_depth == 0 {
            return Err(RerankError::InvalidParams("context_depth must be >= 1".into()));
        }
        if self.page_size == 0 {
            return Err(RerankError::InvalidParams("page_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Items in slotted order with the objective score each had when slotted.
#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub items: Vec<Item>,
    pub scores: Vec<f64>,
}

impl Reranked {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }
}

/// Progress of a demand-based re-ranking session.
#[derive(Debug, Clone)]
pub struct SessionState {
    user: UserProfile,
    served: Vec<Item>,
    remaining: Vec<Item>,
    total: usize,
}

impl SessionState {
    pub fn new(feed: Feed) -> Self {
        let (user, items) = feed.into_parts();
        Self {
            user: user.serving_view(),
            served: Vec::new(),
            total: items.len(),
            remaining: items,
        }
    }

    pub fn served(&self) -> &[Item] {
        &self.served
    }

    pub fn remaining(&self) -> &[Item] {
        &self.remaining
    }

    pub fn cursor(&self) -> usize {
        self.served.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.remaining.is_empty()
    }
}

fn check_scorer<S: Scorer>(scorer: &S, task: usize) -> Result<(), RerankError> {
    if scorer.feature_mode() != FeatureMode::Contextual {
        return Err(RerankError::ModeMismatch(scorer.feature_mode()));
    }
    if task >= scorer.task_count() {
        return Err(RerankError::TaskOutOfRange {
            task,
            tasks: scorer.task_count(),
        });
    }
    Ok(())
}

/// Scores the window at the current cursor and moves the winner to `served`.
fn slot_next<S: Scorer>(
    state: &mut SessionState,
    scorer: &S,
    params: &RerankParams,
    cfg: &FeatureConfig,
) -> Result<f64, RerankError> {
    let slot = state.served.len();
    let ctx = FeedContext::new(&state.served, params.context_depth);
    let window = params.window.min(state.remaining.len());
    let mut best: Option<(usize, f64)> = None;
    for (idx, cand) in state.remaining[..window].iter().enumerate() {
        let mut x = pointwise_features(&state.user, cand, cfg.num_topics)?;
        x.extend_from_slice(extract_contextual(cand, &ctx, slot, cfg)?.as_slice());
        let s = scorer.score(&x)?.task(params.objective_task);
        match best {
            Some((_, top)) if s <= top => {}
            _ => best = Some((idx, s)),
        }
    }
    let (idx, score) = best.ok_or(RerankError::SessionExhausted)?;
    let item = state.remaining.remove(idx);
    state.served.push(item);
    Ok(score)
}

/// Runs the greedy loop for the next `min(page_size, remaining)` slots.
pub fn rerank_page<S: Scorer>(
    state: &mut SessionState,
    scorer: &S,
    params: &RerankParams,
    cfg: &FeatureConfig,
) -> Result<Reranked, RerankError> {
    params.validate()?;
    check_scorer(scorer, params.objective_task)?;
    if state.is_done() {
        return Err(RerankError::SessionExhausted);
    }
    let cfg = FeatureConfig {
        context_depth: params.context_depth,
        feed_length: state.total,
        ..*cfg
    };
    let start = state.served.len();
    let n = params.page_size.min(state.remaining.len());
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        scores.push(slot_next(state, scorer, params, &cfg)?);
    }
    Ok(Reranked {
        items: state.served[start..].to_vec(),
        scores,
    })
}

/// Re-ranks a whole feed in one pass.
pub fn rerank_feed<S: Scorer>(
    feed: &Feed,
    scorer: &S,
    params: &RerankParams,
    cfg: &FeatureConfig,
) -> Result<Reranked, RerankError> {
    if feed.is_empty() {
        return Err(RerankError::EmptyFeed);
    }
    let mut state = SessionState::new(feed.clone());
    let one_page = RerankParams {
        page_size: feed.len(),
        ..*params
    };
    rerank_page(&mut state, scorer, &one_page, cfg)
}

/// Maximal marginal relevance over the main-pass scores.
///
/// Each step picks the remaining item maximizing
/// `lambda * main_score - (1 - lambda) * max_sim`, where `max_sim` is the
/// largest dot product with the last `k` slotted items (0 before anything is
/// slotted).
pub fn mmr_rerank(feed: &Feed, lambda: f64, k: usize) -> Result<Vec<Item>, RerankError> {
    if feed.is_empty() {
        return Err(RerankError::EmptyFeed);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RerankError::InvalidParams(format!("lambda {lambda} outside [0, 1]")));
    }
    let k = k.max(1);
    let mut remaining: Vec<Item> = feed.items().to_vec();
    let mut out: Vec<Item> = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let recent = &out[out.len().saturating_sub(k)..];
        let mut best: Option<(usize, f64)> = None;
        for (idx, cand) in remaining.iter().enumerate() {
            let penalty = recent
                .iter()
                .map(|s| dot(&cand.embedding, &s.embedding))
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
                .unwrap_or(0.0);
            let value = lambda * cand.main_score - (1.0 - lambda) * penalty;
            match best {
                Some((_, top)) if value <= top => {}
                _ => best = Some((idx, value)),
            }
        }
        let (idx, _) = best.expect("remaining is nonempty");
        out.push(remaining.remove(idx));
    }
    Ok(out)
}
