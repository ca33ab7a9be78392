//! Contextual re-ranking for recommendation feeds.
//!
//! A point-wise scorer is extended with features describing the items placed
//! above each candidate, and a greedy pass slots items one position at a time
//! by that contextual score. The crate also carries a synthetic traffic
//! simulator with similarity fatigue and the offline metrics used to check
//! that contextual features repair similarity-dependent miscalibration.
//!
//! Modules:
//!   - [`domain`]: items, users, feeds, impressions, session logs
//!   - [`features`]: the ten contextual features and the point-wise block
//!   - [`model`]: multi-task MLP scorer, Adam trainer, model files
//!   - [`reranker`]: greedy contextual pass, paginated sessions, MMR
//!   - [`simgen`]: synthetic world, ground truth, session logs
//!   - [`eval`]: calibration, normalized entropy, ranker comparison
//!   - [`config`], [`pipeline`], [`service`]: operator surface

pub mod config;
pub mod domain;
pub mod eval;
pub mod features;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod reranker;
pub mod service;
pub mod simgen;

pub use domain::{ContextualFeatureVector, Feed, FeedContext, Impression, Item, SessionLog, UserProfile};
pub use features::FeatureConfig;
pub use model::{FeatureMode, PredictionVector, ScorerModel, TrainConfig};
pub use reranker::{RerankParams, Reranked, SessionState};
pub use simgen::{World, WorldConfig};
