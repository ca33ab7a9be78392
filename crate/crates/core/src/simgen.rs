//! Synthetic traffic: a seeded world of users and items, a ground-truth
//! engagement model with similarity fatigue, and day-partitioned session logs.
//!
//! Ground truth for the primary task:
//!
//! ```text
//! p_true = sigmoid(alpha * dot(user, item) - beta_user * avg_sim(item, above, 5) + bias)
//! ```
//!
//! Task `t` shifts the logit down by `t * task_logit_step`. `beta_user` is
//! drawn from a two-point mixture and never reaches the log.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    dot, unit, DomainError, Feed, FeedContext, Impression, Item, LogError, LogMetadata, SessionLog,
    UserProfile,
};
use crate::features::{avg_similarity, extract_contextual, pointwise_features, FeatureConfig};
use crate::model::sigmoid;

/// Depth of the context the ground truth and the logged diagnostic look at.
pub const FATIGUE_DEPTH: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub dimension: usize,
    pub num_topics: usize,
    pub sessions_per_day: usize,
    pub num_days: usize,
    pub feed_length: usize,
    /// Main-pass candidate pool per session; the top `feed_length` are served.
    pub candidate_pool: usize,
    /// alpha: weight of user-item affinity in the true logit.
    pub affinity_scale: f64,
    pub base_logit: f64,
    /// q: fraction of users with nonzero fatigue.
    pub fatigue_fraction: f64,
    /// beta_hi: fatigue coefficient of the sensitive users.
    pub fatigue_strength: f64,
    /// Std-dev of the logit noise in main-pass scores.
    pub main_score_noise: f64,
    /// Probability of flipping each logged label.
    pub label_noise: f64,
    pub topic_spread: f64,
    pub interest_spread: f64,
    pub task_count: usize,
    pub task_logit_step: f64,
    /// Fraction of sessions served in shuffled instead of main-pass order.
    pub explore_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 400,
            num_items: 2000,
            dimension: 16,
            num_topics: 8,
            sessions_per_day: 100,
            num_days: 26,
            feed_length: 20,
            candidate_pool: 60,
            affinity_scale: 3.0,
            base_logit: 2.5,
            fatigue_fraction: 0.5,
            fatigue_strength: 5.0,
            main_score_noise: 0.5,
            label_noise: 0.0,
            topic_spread: 0.8,
            interest_spread: 0.8,
            task_count: 2,
            task_logit_step: 1.0,
            explore_fraction: 0.0,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        for (name, v) in [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("dimension", self.dimension),
            ("num_topics", self.num_topics),
            ("feed_length", self.feed_length),
            ("task_count", self.task_count),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.candidate_pool < self.feed_length {
            return bad("candidate_pool must be >= feed_length".into());
        }
        if self.candidate_pool > self.num_items {
            return bad("candidate_pool must be <= num_items".into());
        }
        for (name, v) in [
            ("fatigue_fraction", self.fatigue_fraction),
            ("label_noise", self.label_noise),
            ("explore_fraction", self.explore_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("affinity_scale", self.affinity_scale),
            ("base_logit", self.base_logit),
            ("fatigue_strength", self.fatigue_strength),
            ("main_score_noise", self.main_score_noise),
            ("topic_spread", self.topic_spread),
            ("interest_spread", self.interest_spread),
            ("task_logit_step", self.task_logit_step),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.fatigue_strength < 0.0 || self.main_score_noise < 0.0 {
            return bad("fatigue_strength and main_score_noise must be >= 0".into());
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            affinity_scale: self.affinity_scale,
            base_logit: self.base_logit,
            task_logit_step: self.task_logit_step,
        }
    }

    pub fn log_metadata(&self) -> LogMetadata {
        LogMetadata {
            dimension: self.dimension,
            task_count: self.task_count,
            context_depth: FATIGUE_DEPTH,
            num_topics: self.num_topics,
            seed: self.seed,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            context_depth: FATIGUE_DEPTH,
            missing_context_fill: 0.0,
            feed_length: self.feed_length,
            num_topics: self.num_topics,
        }
    }
}

/// The engagement model users in the synthetic world follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub affinity_scale: f64,
    pub base_logit: f64,
    pub task_logit_step: f64,
}

impl GroundTruth {
    pub fn logit(&self, user: &UserProfile, item: &Item, context: &FeedContext<'_>) -> f64 {
        let sim = avg_similarity(item, context, FATIGUE_DEPTH).unwrap_or(0.0);
        self.affinity_scale * dot(&user.interest_embedding, &item.embedding)
            - user.diversity_sensitivity * sim
            + self.base_logit
    }

    /// Engagement probability of the primary task.
    pub fn p_true(&self, user: &UserProfile, item: &Item, context: &FeedContext<'_>) -> f64 {
        sigmoid(self.logit(user, item, context))
    }

    pub fn p_task(&self, user: &UserProfile, item: &Item, context: &FeedContext<'_>, task: usize) -> f64 {
        sigmoid(self.logit(user, item, context) - task as f64 * self.task_logit_step)
    }

    /// Expected number of primary engagements over an ordered slate, each item
    /// judged against the items shown above it.
    pub fn expected_slate_engagement(&self, user: &UserProfile, ordering: &[Item]) -> f64 {
        (0..ordering.len())
            .map(|j| {
                let ctx = FeedContext::new(&ordering[..j], FATIGUE_DEPTH);
                self.p_true(user, &ordering[j], &ctx)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserProfile>,
    pub items: Vec<Item>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = unit(&v) {
            return u;
        }
    }
}

fn around(rng: &mut ChaCha8Rng, centre: &[f64], spread: f64) -> Vec<f64> {
    let scale = spread / (centre.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = centre
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + scale * z
            })
            .collect();
        if let Some(u) = unit(&v) {
            return u;
        }
    }
}

/// Builds the seeded corpus and user population.
///
/// Item embeddings scatter around per-topic centroids, so items sharing a
/// topic are similar. Corpus `main_score` is 0; the main pass assigns scores
/// per session.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids: Vec<Vec<f64>> = (0..cfg.num_topics)
        .map(|_| gaussian_unit(&mut rng, cfg.dimension))
        .collect();
    let items = (0..cfg.num_items)
        .map(|i| {
            let topic = rng.random_range(0..cfg.num_topics);
            let e = around(&mut rng, &centroids[topic], cfg.topic_spread);
            Item::new(format!("item-{i:05}"), e, topic as u32, 0.0)
        })
        .collect();
    let users = (0..cfg.num_users)
        .map(|u| {
            let favourite = rng.random_range(0..cfg.num_topics);
            let e = around(&mut rng, &centroids[favourite], cfg.interest_spread);
            let beta = if rng.random_bool(cfg.fatigue_fraction) {
                cfg.fatigue_strength
            } else {
                0.0
            };
            UserProfile::new(format!("user-{u:04}"), e).with_diversity_sensitivity(beta)
        })
        .collect();
    Ok(World {
        config: cfg.clone(),
        users,
        items,
    })
}

/// Independent generator for one session, derived from the world seed.
pub fn session_rng(seed: u64, stream: u64, session_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) | (session_id & ((1 << 48) - 1)));
    rng
}

/// Main pass: pick a user, sample a candidate pool, score it with noisy true
/// affinity and keep the top `feed_length`.
pub fn main_pass_feed(world: &World, rng: &mut ChaCha8Rng) -> Result<(usize, Feed), SimError> {
    let cfg = &world.config;
    let gt = cfg.ground_truth();
    let user_idx = rng.random_range(0..world.users.len());
    let user = &world.users[user_idx];
    let pool = index::sample(rng, world.items.len(), cfg.candidate_pool);
    let mut scored: Vec<Item> = pool
        .iter()
        .map(|i| {
            let item = &world.items[i];
            let noise: f64 = StandardNormal.sample(rng);
            let z = gt.affinity_scale * dot(&user.interest_embedding, &item.embedding)
                + gt.base_logit
                + cfg.main_score_noise * noise;
            Item {
                main_score: sigmoid(z),
                ..item.clone()
            }
        })
        .collect();
    scored.sort_by(|a, b| b.main_score.total_cmp(&a.main_score));
    scored.truncate(cfg.feed_length);
    Ok((user_idx, Feed::new(user.clone(), scored)?))
}

const LOG_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Simulates `sessions_per_day` sessions on each of the given days.
pub fn simulate_days(world: &World, days: std::ops::Range<u32>) -> Result<SessionLog, SimError> {
    simulate_days_with(world, days, &world.config.feature_config())
}

/// Like [`simulate_days`], logging features under `fcfg`. Labels always
/// follow the ground truth, which looks back [`FATIGUE_DEPTH`] items.
pub fn simulate_days_with(
    world: &World,
    days: std::ops::Range<u32>,
    fcfg: &FeatureConfig,
) -> Result<SessionLog, SimError> {
    let cfg = &world.config;
    let gt = cfg.ground_truth();
    fcfg.validate().map_err(SimError::InvalidConfig)?;
    if fcfg.num_topics != cfg.num_topics {
        return Err(SimError::InvalidConfig("feature num_topics differs from the world".into()));
    }
    let mut impressions = Vec::with_capacity(days.len() * cfg.sessions_per_day * cfg.feed_length);
    for day in days {
        for s in 0..cfg.sessions_per_day {
            let session_id = u64::from(day) * cfg.sessions_per_day as u64 + s as u64;
            let mut rng = session_rng(cfg.seed, LOG_STREAM, session_id);
            let (user_idx, feed) = main_pass_feed(world, &mut rng)?;
            let user = &world.users[user_idx];
            let mut served = feed.items().to_vec();
            if rng.random_bool(cfg.explore_fraction) {
                served.shuffle(&mut rng);
            }
            let session_fcfg = fcfg.with_feed_length(served.len());
            for pos in 0..served.len() {
                let item = &served[pos];
                let ctx = FeedContext::new(&served[..pos], FATIGUE_DEPTH);
                let fctx = FeedContext::new(&served[..pos], fcfg.context_depth);
                let labels = (0..cfg.task_count)
                    .map(|t| {
                        let clicked = rng.random_bool(gt.p_task(user, item, &ctx, t));
                        let flip = cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise);
                        u8::from(clicked != flip)
                    })
                    .collect();
                impressions.push(Impression {
                    session_id,
                    day,
                    user_id: user.id.clone(),
                    item_id: item.id.clone(),
                    position: pos as u32,
                    pointwise: pointwise_features(user, item, cfg.num_topics)?,
                    contextual: extract_contextual(item, &fctx, pos, &session_fcfg)?,
                    labels,
                    similarity_score: avg_similarity(item, &fctx, fcfg.context_depth)?,
                });
            }
        }
    }
    let metadata = LogMetadata {
        context_depth: fcfg.context_depth,
        ..cfg.log_metadata()
    };
    Ok(SessionLog::new(metadata, impressions)?)
}

/// Full log over days `0..num_days`.
pub fn simulate_sessions(world: &World) -> Result<SessionLog, SimError> {
    simulate_days(world, 0..world.config.num_days as u32)
}

/// A fresh evaluation session: the user and their main-pass feed.
#[derive(Debug, Clone)]
pub struct TestSession {
    pub session_id: u64,
    pub user_index: usize,
    pub feed: Feed,
}

/// Main-pass feeds for `count` sessions drawn from a stream disjoint from the
/// training log.
pub fn test_sessions(world: &World, count: usize) -> Result<Vec<TestSession>, SimError> {
    (0..count as u64)
        .map(|session_id| {
            let mut rng = session_rng(world.config.seed, TEST_STREAM, session_id);
            let (user_index, feed) = main_pass_feed(world, &mut rng)?;
            Ok(TestSession {
                session_id,
                user_index,
                feed,
            })
        })
        .collect()
}
