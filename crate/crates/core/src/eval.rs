//! Offline metrics: calibration (sum of predictions over sum of labels),
//! calibration sliced by similarity bucket, normalized entropy, and
//! oracle-based comparison of rankers on simulated sessions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{FeedContext, Item};
use crate::features::{avg_similarity, FeatureConfig};
use crate::model::{DayNe, ScorerModel, PROB_CLAMP};
use crate::reranker::{mmr_rerank, rerank_feed, RerankError, RerankParams};
use crate::simgen::{TestSession, World, FATIGUE_DEPTH};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("labels sum to zero; calibration undefined")]
    ZeroLabelMass,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("bucket edges must be strictly increasing and cover [-1, 1]")]
    BadEdges,
    #[error(transparent)]
    Rerank(#[from] RerankError),
}

fn check_lengths(p: usize, y: usize) -> Result<(), EvalError> {
    if p != y {
        return Err(EvalError::LengthMismatch {
            predictions: p,
            labels: y,
        });
    }
    if p == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Sum of predictions divided by sum of labels.
pub fn calibration(predictions: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(predictions.len(), labels.len())?;
    let sum_p: f64 = predictions.iter().sum();
    let sum_y: f64 = labels.iter().map(|&y| f64::from(y)).sum();
    if sum_y == 0.0 {
        return Err(EvalError::ZeroLabelMass);
    }
    Ok(sum_p / sum_y)
}

/// `n` equal-width buckets over `[-1, 1]`.
pub fn uniform_edges(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
}

/// One prediction to be sliced by its logged similarity score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredImpression {
    pub similarity_score: f64,
    pub prediction: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCalibration {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub sum_prediction: f64,
    pub sum_label: f64,
    /// Absent when the bucket has no positive labels.
    pub calibration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub edges: Vec<f64>,
    pub buckets: Vec<BucketCalibration>,
    pub total: usize,
    pub sum_prediction: f64,
    pub sum_label: f64,
    pub overall: Option<f64>,
}

impl CalibrationReport {
    /// Buckets with at least `min_count` samples and a defined calibration.
    pub fn populated(&self, min_count: usize) -> impl Iterator<Item = &BucketCalibration> {
        self.buckets
            .iter()
            .filter(move |b| b.count >= min_count && b.calibration.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_low,bucket_high,count,calibration\n");
        for b in &self.buckets {
            let cal = b.calibration.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", b.low, b.high, b.count, cal);
        }
        out
    }
}

fn bucket_index(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    // half-open [lo, hi) buckets; the last one is closed; out-of-range clamps
    match edges[1..n].iter().position(|&e| x < e) {
        Some(i) => i,
        None => n - 1,
    }
}

/// Calibration per similarity bucket, plus the overall ratio.
pub fn calibration_by_bucket(
    rows: &[ScoredImpression],
    edges: &[f64],
) -> Result<CalibrationReport, EvalError> {
    let valid = edges.len() >= 2
        && edges.windows(2).all(|w| w[0] < w[1])
        && edges[0] <= -1.0
        && edges[edges.len() - 1] >= 1.0;
    if !valid {
        return Err(EvalError::BadEdges);
    }
    let mut buckets: Vec<BucketCalibration> = edges
        .windows(2)
        .map(|w| BucketCalibration {
            low: w[0],
            high: w[1],
            count: 0,
            sum_prediction: 0.0,
            sum_label: 0.0,
            calibration: None,
        })
        .collect();
    for r in rows {
        let b = &mut buckets[bucket_index(edges, r.similarity_score)];
        b.count += 1;
        b.sum_prediction += r.prediction;
        b.sum_label += f64::from(r.label);
    }
    for b in &mut buckets {
        if b.sum_label > 0.0 {
            b.calibration = Some(b.sum_prediction / b.sum_label);
        }
    }
    let sum_prediction: f64 = rows.iter().map(|r| r.prediction).sum();
    let sum_label: f64 = rows.iter().map(|r| f64::from(r.label)).sum();
    Ok(CalibrationReport {
        edges: edges.to_vec(),
        buckets,
        total: rows.len(),
        sum_prediction,
        sum_label,
        overall: (sum_label > 0.0).then(|| sum_prediction / sum_label),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NEReport {
    pub ne: f64,
    pub background_ctr: f64,
    pub mean_log_loss: f64,
    pub impressions: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<DayNe>,
    /// `100 * (baseline_ne - ne) / baseline_ne`; positive means better.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_pct: Option<f64>,
}

impl NEReport {
    pub fn against(mut self, baseline: &NEReport) -> Self {
        self.improvement_pct = Some(100.0 * (baseline.ne - self.ne) / baseline.ne);
        self
    }
}

fn binary_entropy(c: f64) -> f64 {
    -(c * c.ln() + (1.0 - c) * (1.0 - c).ln())
}

/// Mean log-loss divided by the entropy of the background rate, where the
/// background rate is the mean of `labels`.
pub fn normalized_entropy(predictions: &[f64], labels: &[u8]) -> Result<NEReport, EvalError> {
    check_lengths(predictions.len(), labels.len())?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(EvalError::DegenerateLabels);
    }
    let background_ctr = positives as f64 / labels.len() as f64;
    normalized_entropy_with_background(predictions, labels, background_ctr)
}

/// Normalized entropy against an externally supplied background rate, such as
/// the training-set CTR.
pub fn normalized_entropy_with_background(
    predictions: &[f64],
    labels: &[u8],
    background_ctr: f64,
) -> Result<NEReport, EvalError> {
    check_lengths(predictions.len(), labels.len())?;
    if !(background_ctr > 0.0 && background_ctr < 1.0) {
        return Err(EvalError::DegenerateLabels);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    let mean_log_loss = total / labels.len() as f64;
    Ok(NEReport {
        ne: mean_log_loss / binary_entropy(background_ctr),
        background_ctr,
        mean_log_loss,
        impressions: labels.len(),
        trajectory: Vec::new(),
        improvement_pct: None,
    })
}

/// A slate policy evaluated against the simulator oracle.
#[derive(Debug, Clone)]
pub enum Ranker<'a> {
    /// Main-pass order, unchanged.
    PointWise,
    Mmr { lambda: f64, depth: usize },
    Contextual {
        model: &'a ScorerModel,
        params: RerankParams,
        features: FeatureConfig,
    },
}

impl Ranker<'_> {
    pub fn order(&self, session: &TestSession) -> Result<Vec<Item>, EvalError> {
        Ok(match self {
            Ranker::PointWise => session.feed.items().to_vec(),
            Ranker::Mmr { lambda, depth } => mmr_rerank(&session.feed, *lambda, *depth)?,
            Ranker::Contextual {
                model,
                params,
                features,
            } => rerank_feed(&session.feed, *model, params, features)?.items,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub sessions: usize,
    pub mean_engagement: f64,
    /// Fraction of sessions where this ranker strictly beats point-wise order.
    pub win_rate: f64,
    /// Mean of `(value - pointwise) / pointwise`.
    pub mean_relative_diff: f64,
    pub mean_abs_relative_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerStats {
    pub name: String,
    pub all: SegmentStats,
    pub fatigued: SegmentStats,
    pub unfatigued: SegmentStats,
    /// Mean similarity of each slotted item to the 5 items above it.
    pub mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub sessions: usize,
    pub rankers: Vec<RankerStats>,
}

impl ComparisonReport {
    pub fn ranker(&self, name: &str) -> Option<&RankerStats> {
        self.rankers.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}",
            "ranker", "engage", "fatigued", "unfatig.", "win(fat)", "rel(fat)", "sim"
        );
        for r in &self.rankers {
            let _ = writeln!(
                out,
                "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>9.3} {:>+9.4} {:>9.4}",
                r.name,
                r.all.mean_engagement,
                r.fatigued.mean_engagement,
                r.unfatigued.mean_engagement,
                r.fatigued.win_rate,
                r.fatigued.mean_relative_diff,
                r.mean_similarity
            );
        }
        out
    }
}

fn mean_context_similarity(order: &[Item]) -> f64 {
    if order.len() < 2 {
        return 0.0;
    }
    let total: f64 = (1..order.len())
        .map(|j| {
            avg_similarity(&order[j], &FeedContext::new(&order[..j], FATIGUE_DEPTH), FATIGUE_DEPTH)
                .unwrap_or(0.0)
        })
        .sum();
    total / (order.len() - 1) as f64
}

#[derive(Default)]
struct Acc {
    n: usize,
    value: f64,
    wins: usize,
    rel: f64,
    abs_rel: f64,
}

impl Acc {
    fn add(&mut self, value: f64, reference: f64) {
        self.n += 1;
        self.value += value;
        if value > reference {
            self.wins += 1;
        }
        let rel = (value - reference) / reference;
        self.rel += rel;
        self.abs_rel += rel.abs();
    }

    fn finish(&self) -> SegmentStats {
        let n = self.n.max(1) as f64;
        SegmentStats {
            sessions: self.n,
            mean_engagement: self.value / n,
            win_rate: self.wins as f64 / n,
            mean_relative_diff: self.rel / n,
            mean_abs_relative_diff: self.abs_rel / n,
        }
    }
}

/// Scores every ranker's slate for every session with the ground-truth
/// expected engagement, split by whether the user is fatigue-sensitive.
pub fn compare_rankers(
    world: &World,
    sessions: &[TestSession],
    rankers: &[(String, Ranker<'_>)],
) -> Result<ComparisonReport, EvalError> {
    let gt = world.config.ground_truth();
    let mut stats = Vec::with_capacity(rankers.len());
    let references: Vec<f64> = sessions
        .iter()
        .map(|s| gt.expected_slate_engagement(&world.users[s.user_index], s.feed.items()))
        .collect();
    for (name, ranker) in rankers {
        let (mut all, mut fat, mut unfat) = (Acc::default(), Acc::default(), Acc::default());
        let mut sim = 0.0;
        for (session, &reference) in sessions.iter().zip(&references) {
            let user = &world.users[session.user_index];
            let order = ranker.order(session)?;
            let value = gt.expected_slate_engagement(user, &order);
            sim += mean_context_similarity(&order);
            all.add(value, reference);
            if user.diversity_sensitivity() > 0.0 {
                fat.add(value, reference);
            } else {
                unfat.add(value, reference);
            }
        }
        stats.push(RankerStats {
            name: name.clone(),
            all: all.finish(),
            fatigued: fat.finish(),
            unfatigued: unfat.finish(),
            mean_similarity: sim / sessions.len().max(1) as f64,
        });
    }
    Ok(ComparisonReport {
        sessions: sessions.len(),
        rankers: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn calibration_examples() {
        assert_eq!(calibration(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(calibration(&[0.5, 0.5], &[1, 1]).unwrap(), 0.5);
        assert_eq!(calibration(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap(), 1.0);
        assert!(matches!(calibration(&[0.3], &[0]), Err(EvalError::ZeroLabelMass)));
        assert!(matches!(
            calibration(&[0.3], &[0, 1]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredImpression> {
        (0..n)
            .map(|_| ScoredImpression {
                similarity_score: rng.random_range(-1.0..=1.0),
                prediction: rng.random_range(0.01..0.99),
                label: rng.random_range(0..2),
            })
            .collect()
    }

    #[test]
    fn single_bucket_equals_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rows(&mut rng, 200);
        let report = calibration_by_bucket(&r, &[-1.0, 1.0]).unwrap();
        assert_eq!(report.buckets[0].calibration, report.overall);
        assert_eq!(report.buckets[0].count, 200);
    }

    #[test]
    fn perfect_predictor_buckets_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<ScoredImpression> = rows(&mut rng, 500)
            .into_iter()
            .map(|mut x| {
                x.prediction = f64::from(x.label);
                x
            })
            .collect();
        let report = calibration_by_bucket(&r, &uniform_edges(40)).unwrap();
        for b in report.buckets.iter().filter(|b| b.sum_label > 0.0) {
            assert_eq!(b.calibration, Some(1.0));
        }
    }

    #[test]
    fn buckets_are_half_open_with_closed_last() {
        let edges = uniform_edges(4);
        assert_eq!(bucket_index(&edges, -1.0), 0);
        assert_eq!(bucket_index(&edges, -0.5), 1);
        assert_eq!(bucket_index(&edges, 0.4999), 2);
        assert_eq!(bucket_index(&edges, 1.0), 3);
        assert_eq!(bucket_index(&edges, 1.0 + 1e-12), 3);
        assert_eq!(bucket_index(&edges, -2.0), 0);
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(matches!(calibration_by_bucket(&[], &[0.0, 1.0]), Err(EvalError::BadEdges)));
        assert!(matches!(
            calibration_by_bucket(&[], &[-1.0, 0.5, 0.5, 1.0]),
            Err(EvalError::BadEdges)
        ));
    }

    #[test]
    fn buckets_add_up_to_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rows(&mut rng, 1000);
        let report = calibration_by_bucket(&r, &uniform_edges(40)).unwrap();
        let n: usize = report.buckets.iter().map(|b| b.count).sum();
        let sp: f64 = report.buckets.iter().map(|b| b.sum_prediction).sum();
        let sy: f64 = report.buckets.iter().map(|b| b.sum_label).sum();
        assert_eq!(n, 1000);
        assert!((sp / sy - report.overall.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn background_predictor_has_unit_ne() {
        let labels = [1, 0, 0, 1, 0, 0, 0, 1];
        let c = 3.0 / 8.0;
        let r = normalized_entropy(&[c; 8], &labels).unwrap();
        assert!((r.ne - 1.0).abs() < 1e-9);
        assert_eq!(r.background_ctr, c);
    }

    #[test]
    fn perfect_predictor_has_near_zero_ne() {
        let labels = [1, 0, 1, 0];
        let p: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        assert!(normalized_entropy(&p, &labels).unwrap().ne < 1e-10);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(
            normalized_entropy(&[0.5, 0.5], &[1, 1]),
            Err(EvalError::DegenerateLabels)
        ));
    }

    #[test]
    fn ne_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 300;
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mut pos = 0.0;
            let mut ll = 0.0;
            for i in 0..n {
                let yi = y[i] as f64;
                pos += yi;
                ll += -(yi * p[i].ln() + (1.0 - yi) * (1.0 - p[i]).ln());
            }
            let c = pos / n as f64;
            let want = (ll / n as f64) / -(c * c.ln() + (1.0 - c) * (1.0 - c).ln());
            assert!((normalized_entropy(&p, &y).unwrap().ne - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ne_unchanged_by_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<u8> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let once = normalized_entropy(&p, &y).unwrap().ne;
        let p2: Vec<f64> = p.iter().chain(&p).copied().collect();
        let y2: Vec<u8> = y.iter().chain(&y).copied().collect();
        assert!((normalized_entropy(&p2, &y2).unwrap().ne - once).abs() < 1e-12);
    }

    #[test]
    fn improvement_sign() {
        let base = normalized_entropy(&[0.5, 0.5], &[1, 0]).unwrap();
        let better = normalized_entropy(&[0.6, 0.4], &[1, 0]).unwrap().against(&base);
        assert!(better.improvement_pct.unwrap() > 0.0);
    }
}
