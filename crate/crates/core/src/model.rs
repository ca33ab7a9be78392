//! Multi-task feed-forward scorer and its mini-batch Adam trainer.
//!
//! The same network type serves as the baseline (point-wise inputs only) and
//! the contextual model (point-wise inputs followed by the ten contextual
//! features). Hidden layers use ReLU; each task head is a logistic unit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ContextualFeatureVector, Impression, SessionLog};
use crate::eval::{self, EvalError};
use crate::features::pointwise_dim;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Probability clamp applied before logs and when storing predictions.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected} inputs, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("session log is empty")]
    EmptyLog,
    #[error("model file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Baseline,
    Contextual,
}

impl FeatureMode {
    /// Input width for a given point-wise block width.
    pub fn input_dim(self, pointwise: usize) -> usize {
        match self {
            FeatureMode::Baseline => pointwise,
            FeatureMode::Contextual => pointwise + ContextualFeatureVector::LEN,
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(FeatureMode::Baseline),
            "contextual" => Ok(FeatureMode::Contextual),
            other => Err(format!("unknown feature mode {other:?}")),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::Baseline => "baseline",
            FeatureMode::Contextual => "contextual",
        })
    }
}

/// One dense layer; `w` is row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: vec![vec![0.0; inputs]; outputs],
            b: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn outputs(&self) -> usize {
        self.b.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.iter().zip(&self.b).map(|(row, b)| {
            row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b
        }));
    }
}

/// Information the serving path needs to rebuild inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub num_topics: usize,
    pub context_depth: usize,
    /// Empirical positive rate per task on the training data.
    #[serde(default)]
    pub background_ctr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub version: u32,
    pub feature_mode: FeatureMode,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub task_count: usize,
    pub layers: Vec<DenseLayer>,
    pub meta: ModelMeta,
}

/// Per-task engagement probabilities, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector(pub Vec<f64>);

impl PredictionVector {
    pub fn task(&self, t: usize) -> f64 {
        self.0[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Summed binary cross-entropy over tasks, with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn loss(predictions: &[f64], labels: &[u8]) -> f64 {
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

impl ScorerModel {
    /// Fresh network with Glorot-uniform weights and zero biases.
    pub fn initialized(
        mode: FeatureMode,
        input_dim: usize,
        hidden_dims: &[usize],
        task_count: usize,
        meta: ModelMeta,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(task_count);
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    w: (0..fan_out)
                        .map(|_| (0..fan_in).map(|_| rng.random_range(-bound..=bound)).collect())
                        .collect(),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Self {
            version: MODEL_FORMAT_VERSION,
            feature_mode: mode,
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            task_count,
            layers,
            meta,
        }
    }

    /// Network with every weight and bias set to zero.
    pub fn zeroed(
        mode: FeatureMode,
        input_dim: usize,
        hidden_dims: &[usize],
        task_count: usize,
        meta: ModelMeta,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(task_count);
        Self {
            version: MODEL_FORMAT_VERSION,
            feature_mode: mode,
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            task_count,
            layers: dims.windows(2).map(|p| DenseLayer::zeros(p[0], p[1])).collect(),
            meta,
        }
    }

    /// Checks the layer shape chain and that every parameter is finite.
    pub fn check_shapes(&self) -> Result<(), ModelError> {
        if self.task_count == 0 {
            return Err(ModelError::CorruptModel("task count must be >= 1".into()));
        }
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.task_count);
        if self.layers.len() != dims.len() - 1 {
            return Err(ModelError::CorruptModel(format!(
                "{} layers for {} declared dims",
                self.layers.len(),
                dims.len()
            )));
        }
        for (i, (layer, pair)) in self.layers.iter().zip(dims.windows(2)).enumerate() {
            if layer.b.len() != pair[1] || layer.w.len() != pair[1] {
                return Err(ModelError::CorruptModel(format!(
                    "layer {i} has {} outputs, expected {}",
                    layer.w.len(),
                    pair[1]
                )));
            }
            if layer.w.iter().any(|row| row.len() != pair[0]) {
                return Err(ModelError::CorruptModel(format!(
                    "layer {i} rows must have {} inputs",
                    pair[0]
                )));
            }
            let finite = layer.b.iter().chain(layer.w.iter().flatten()).all(|x| x.is_finite());
            if !finite {
                return Err(ModelError::CorruptModel(format!("layer {i} has non-finite weights")));
            }
        }
        if self.feature_mode == FeatureMode::Contextual
            && self.input_dim < ContextualFeatureVector::LEN
        {
            return Err(ModelError::CorruptModel(
                "contextual model narrower than the contextual block".into(),
            ));
        }
        Ok(())
    }

    /// Width of the point-wise block this model expects.
    pub fn pointwise_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::Baseline => self.input_dim,
            FeatureMode::Contextual => self.input_dim - ContextualFeatureVector::LEN,
        }
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        if features.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                actual: features.len(),
            });
        }
        let mut cur = features.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i != last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward(&self, features: &[f64]) -> Result<PredictionVector, ModelError> {
        let logits = self.logits(features)?;
        Ok(PredictionVector(
            logits.into_iter().map(|z| clamp_prob(sigmoid(z))).collect(),
        ))
    }

    /// Loss and parameter gradients for one example.
    pub fn loss_and_gradient(
        &self,
        features: &[f64],
        labels: &[u8],
    ) -> Result<(f64, Vec<DenseLayer>), ModelError> {
        let mut grads: Vec<DenseLayer> = self
            .layers
            .iter()
            .map(|l| DenseLayer::zeros(l.inputs(), l.outputs()))
            .collect();
        let loss = self.accumulate_gradient(features, labels, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `scale * dLoss/dParam` into `grads`; returns the example loss.
    fn accumulate_gradient(
        &self,
        features: &[f64],
        labels: &[u8],
        scale: f64,
        grads: &mut [DenseLayer],
    ) -> Result<f64, ModelError> {
        if features.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                actual: features.len(),
            });
        }
        if labels.len() != self.task_count {
            return Err(ModelError::DimensionMismatch {
                expected: self.task_count,
                actual: labels.len(),
            });
        }
        // activations[i] is the input to layer i; activations.last() is the logits
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(activations.last().unwrap(), &mut out);
            if i != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            activations.push(out);
        }
        let logits = activations.last().unwrap();
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let loss = loss(&probs, labels);

        let mut delta: Vec<f64> = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| (p - f64::from(y)) * scale)
            .collect();
        for i in (0..self.layers.len()).rev() {
            let input = &activations[i];
            let layer = &self.layers[i];
            let g = &mut grads[i];
            for (o, d) in delta.iter().enumerate() {
                g.b[o] += d;
                for (gw, x) in g.w[o].iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs()];
            for (o, d) in delta.iter().enumerate() {
                for (p, w) in prev.iter_mut().zip(&layer.w[o]) {
                    *p += d * w;
                }
            }
            // ReLU derivative on the hidden activation feeding layer i
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = self.to_json();
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: self.version,
            feature_mode: self.feature_mode,
            dims: ModelDims {
                input_dim: self.input_dim,
                hidden_dims: self.hidden_dims.clone(),
                task_count: self.task_count,
            },
            layers: self.layers.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: file.version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let model = ScorerModel {
            version: file.version,
            feature_mode: file.feature_mode,
            input_dim: file.dims.input_dim,
            hidden_dims: file.dims.hidden_dims,
            task_count: file.dims.task_count,
            layers: file.layers,
            meta: file.meta,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.b.len() * (l.inputs() + 1)).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDims {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    task_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    feature_mode: FeatureMode,
    dims: ModelDims,
    layers: Vec<DenseLayer>,
    meta: ModelMeta,
}

/// Anything that maps an input vector to per-task probabilities.
pub trait Scorer {
    fn feature_mode(&self) -> FeatureMode;
    fn task_count(&self) -> usize;
    fn score(&self, features: &[f64]) -> Result<PredictionVector, ModelError>;
}

impl Scorer for ScorerModel {
    fn feature_mode(&self) -> FeatureMode {
        self.feature_mode
    }

    fn task_count(&self) -> usize {
        self.task_count
    }

    fn score(&self, features: &[f64]) -> Result<PredictionVector, ModelError> {
        self.forward(features)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn feature_mode(&self) -> FeatureMode {
        (**self).feature_mode()
    }

    fn task_count(&self) -> usize {
        (**self).task_count()
    }

    fn score(&self, features: &[f64]) -> Result<PredictionVector, ModelError> {
        (**self).score(features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub initial_window_days: usize,
    pub single_pass: bool,
    /// Passes over the initial window when `single_pass` is off. Recurrent
    /// days are always trained once.
    pub epochs: usize,
    pub hidden_dims: Vec<usize>,
    /// Learning rate at the last step as a fraction of `learning_rate`; the
    /// rate decays linearly from the initial value over the planned steps.
    pub final_lr_fraction: f64,
    /// Task whose NE is tracked in the per-day trajectory.
    pub objective_task: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            initial_window_days: 21,
            single_pass: true,
            epochs: 1,
            hidden_dims: vec![64, 32],
            final_lr_fraction: 0.01,
            objective_task: 0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be > 0");
        }
        if self.initial_window_days == 0 {
            return bad("initial_window_days must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be >= 1");
        }
        Ok(())
    }

    fn passes(&self) -> usize {
        if self.single_pass {
            1
        } else {
            self.epochs.max(1)
        }
    }
}

/// Progressive NE of the objective task on one day, measured before the model
/// trained on that day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayNe {
    pub day: u32,
    pub impressions: usize,
    pub ne: f64,
    pub background_ctr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    pub initial_weights: ScorerModel,
    pub trajectory: Vec<DayNe>,
    pub steps: usize,
}

/// Model input for a logged impression under the given mode.
pub fn impression_input(imp: &Impression, mode: FeatureMode) -> Vec<f64> {
    let mut x = imp.pointwise.clone();
    if mode == FeatureMode::Contextual {
        x.extend_from_slice(imp.contextual.as_slice());
    }
    x
}

struct Adam {
    m: Vec<DenseLayer>,
    v: Vec<DenseLayer>,
    t: i32,
    /// Steps over which the rate decays; 0 disables decay.
    planned_steps: usize,
}

impl Adam {
    fn new(model: &ScorerModel) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs(), l.outputs()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            planned_steps: 0,
        }
    }

    fn learning_rate(&self, cfg: &TrainConfig) -> f64 {
        if self.planned_steps <= 1 {
            return cfg.learning_rate;
        }
        let progress = ((self.t - 1) as f64 / (self.planned_steps - 1) as f64).min(1.0);
        cfg.learning_rate * (1.0 - progress * (1.0 - cfg.final_lr_fraction))
    }

    fn step(&mut self, model: &mut ScorerModel, grads: &[DenseLayer], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let lr = self.learning_rate(cfg);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        };
        for (((layer, g), m), v) in model
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for o in 0..layer.b.len() {
                update(&mut layer.b[o], g.b[o], &mut m.b[o], &mut v.b[o]);
                for i in 0..layer.w[o].len() {
                    update(&mut layer.w[o][i], g.w[o][i], &mut m.w[o][i], &mut v.w[o][i]);
                }
            }
        }
    }
}

/// Mean loss over a set of examples.
pub fn mean_loss(model: &ScorerModel, inputs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(labels) {
        total += loss(model.forward(x)?.as_slice(), y);
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Runs mini-batch Adam over `(inputs, labels)` in the order given by `order`.
fn run_pass(
    model: &mut ScorerModel,
    adam: &mut Adam,
    cfg: &TrainConfig,
    inputs: &[Vec<f64>],
    labels: &[Vec<u8>],
    order: &[usize],
) -> Result<usize, ModelError> {
    let mut grads: Vec<DenseLayer> = model
        .layers
        .iter()
        .map(|l| DenseLayer::zeros(l.inputs(), l.outputs()))
        .collect();
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_size) {
        for g in &mut grads {
            g.b.iter_mut().for_each(|x| *x = 0.0);
            g.w.iter_mut().flatten().for_each(|x| *x = 0.0);
        }
        let scale = 1.0 / batch.len() as f64;
        for &idx in batch {
            model.accumulate_gradient(&inputs[idx], &labels[idx], scale, &mut grads)?;
        }
        adam.step(model, &grads, cfg);
        steps += 1;
    }
    Ok(steps)
}

/// Trains on in-memory examples for a fixed number of passes. Used for toy
/// problems and tests; the log-driven schedule lives in [`train`].
pub fn fit(
    model: &mut ScorerModel,
    cfg: &TrainConfig,
    inputs: &[Vec<f64>],
    labels: &[Vec<u8>],
    passes: usize,
) -> Result<usize, ModelError> {
    cfg.validate()?;
    let mut adam = Adam::new(model);
    adam.planned_steps = passes * inputs.len().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = 0;
    for _ in 0..passes {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        steps += run_pass(model, &mut adam, cfg, inputs, labels, &order)?;
    }
    Ok(steps)
}

/// Trains a scorer on a day-partitioned log.
///
/// The first `initial_window_days` distinct days are trained as one block;
/// every later day is first scored (progressive NE) and then trained on, in
/// chronological order. Examples are shuffled within each partition with a
/// generator seeded from `cfg.seed`.
pub fn train(log: &SessionLog, cfg: &TrainConfig, mode: FeatureMode) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if log.is_empty() {
        return Err(ModelError::EmptyLog);
    }
    let meta = log.metadata;
    if cfg.objective_task >= meta.task_count {
        return Err(ModelError::InvalidConfig(format!(
            "objective_task {} out of range for {} tasks",
            cfg.objective_task, meta.task_count
        )));
    }
    let pw = pointwise_dim(meta.num_topics);
    let input_dim = mode.input_dim(pw);
    for imp in &log.impressions {
        if imp.pointwise.len() != pw {
            return Err(ModelError::DimensionMismatch {
                expected: pw,
                actual: imp.pointwise.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background_ctr = (0..meta.task_count)
        .map(|t| {
            let pos = log.impressions.iter().filter(|i| i.labels[t] == 1).count();
            pos as f64 / log.len() as f64
        })
        .collect();
    let model_meta = ModelMeta {
        num_topics: meta.num_topics,
        context_depth: meta.context_depth,
        background_ctr,
    };
    let mut model = ScorerModel::initialized(
        mode,
        input_dim,
        &cfg.hidden_dims,
        meta.task_count,
        model_meta,
        &mut rng,
    );
    let initial_weights = model.clone();
    let mut adam = Adam::new(&model);

    let days = log.days();
    let split = cfg.initial_window_days.min(days.len());
    let mut partitions: Vec<Vec<u32>> = vec![days[..split].to_vec()];
    partitions.extend(days[split..].iter().map(|&d| vec![d]));

    let batches = |part: &[u32]| {
        let n = log.impressions.iter().filter(|i| part.contains(&i.day)).count();
        n.div_ceil(cfg.batch_size)
    };
    let passes_for = |pi: usize| if pi == 0 { cfg.passes() } else { 1 };
    adam.planned_steps = partitions
        .iter()
        .enumerate()
        .map(|(pi, p)| passes_for(pi) * batches(p))
        .sum();

    let mut trajectory = Vec::new();
    let mut steps = 0;
    for (pi, part) in partitions.iter().enumerate() {
        let rows: Vec<&Impression> = log
            .impressions
            .iter()
            .filter(|i| part.contains(&i.day))
            .collect();
        let inputs: Vec<Vec<f64>> = rows.iter().map(|i| impression_input(i, mode)).collect();
        let labels: Vec<Vec<u8>> = rows.iter().map(|i| i.labels.clone()).collect();

        if pi > 0 {
            let t = cfg.objective_task;
            let mut preds = Vec::with_capacity(inputs.len());
            for x in &inputs {
                preds.push(model.forward(x)?.task(t));
            }
            let ys: Vec<u8> = labels.iter().map(|l| l[t]).collect();
            match eval::normalized_entropy(&preds, &ys) {
                Ok(report) => trajectory.push(DayNe {
                    day: part[0],
                    impressions: rows.len(),
                    ne: report.ne,
                    background_ctr: report.background_ctr,
                }),
                Err(EvalError::DegenerateLabels) => {}
                Err(e) => return Err(ModelError::CorruptModel(e.to_string())),
            }
        }

        for _ in 0..passes_for(pi) {
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            order.shuffle(&mut rng);
            steps += run_pass(&mut model, &mut adam, cfg, &inputs, &labels, &order)?;
        }
    }

    Ok(TrainOutcome {
        model,
        initial_weights,
        trajectory,
        steps,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn meta() -> ModelMeta {
        ModelMeta {
            num_topics: 1,
            context_depth: 5,
            background_ctr: vec![],
        }
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let m = ScorerModel::zeroed(FeatureMode::Baseline, 3, &[4, 2], 2, meta());
        let p = m.forward(&[0.3, -1.0, 7.0]).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
    }

    #[test]
    fn single_layer_closed_form() {
        let mut m = ScorerModel::zeroed(FeatureMode::Baseline, 2, &[], 2, meta());
        m.layers[0].w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        m.layers[0].b = vec![0.5, -0.25];
        let p = m.forward(&[1.0, 2.0]).unwrap();
        assert!((p.0[0] - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-15);
        assert!((p.0[1] - 1.0 / (1.0 + (-1.75f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = ScorerModel::zeroed(FeatureMode::Baseline, 3, &[2], 1, meta());
        assert!(matches!(
            m.forward(&[1.0]),
            Err(ModelError::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    /// Scalar-loop forward written independently of `DenseLayer::apply`.
    fn reference_forward(m: &ScorerModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (li, layer) in m.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.b.len()];
            for o in 0..z.len() {
                let mut acc = layer.b[o];
                for i in 0..a.len() {
                    acc += layer.w[o][i] * a[i];
                }
                z[o] = if li + 1 < m.layers.len() { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
    }

    #[test]
    fn random_net_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = ScorerModel::initialized(FeatureMode::Baseline, 5, &[7, 4], 3, meta(), &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = m.forward(&x).unwrap();
            for (g, w) in got.0.iter().zip(reference_forward(&m, &x)) {
                assert!((g - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn loss_closed_forms() {
        assert!((loss(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss(&[1.0, 0.0], &[1, 0]) <= 1e-11);
    }

    #[test]
    fn loss_matches_scalar_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
            let y: Vec<u8> = (0..4).map(|_| rng.random_range(0..2)).collect();
            let mut want = 0.0;
            for i in 0..4 {
                let yi = y[i] as f64;
                want -= yi * p[i].ln() + (1.0 - yi) * (1.0 - p[i]).ln();
            }
            assert!((loss(&p, &y) - want).abs() < 1e-12);
        }
    }

    fn perturbed_loss(m: &ScorerModel, x: &[f64], y: &[u8], layer: usize, o: usize, i: Option<usize>, h: f64) -> f64 {
        let mut m = m.clone();
        match i {
            Some(i) => m.layers[layer].w[o][i] += h,
            None => m.layers[layer].b[o] += h,
        }
        loss(&reference_forward(&m, x), y)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-4;
        for _ in 0..5 {
            let m = ScorerModel::initialized(FeatureMode::Baseline, 4, &[6], 2, meta(), &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = vec![1, 0];
            let (_, grads) = m.loss_and_gradient(&x, &y).unwrap();
            for (l, g) in grads.iter().enumerate() {
                for o in 0..g.b.len() {
                    let fd = (perturbed_loss(&m, &x, &y, l, o, None, h)
                        - perturbed_loss(&m, &x, &y, l, o, None, -h))
                        / (2.0 * h);
                    assert!((fd - g.b[o]).abs() <= 1e-4 * fd.abs().max(g.b[o].abs()).max(1e-6));
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ScorerModel::initialized(FeatureMode::Baseline, 2, &[4], 1, meta(), &mut rng);
        let before = m.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let ys = vec![vec![1], vec![0], vec![1]];
        fit(&mut m, &cfg, &xs, &ys, 3).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn separable_toy_problem_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ScorerModel::initialized(FeatureMode::Baseline, 1, &[8], 1, meta(), &mut rng);
        let xs: Vec<Vec<f64>> = (0..64).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let ys: Vec<Vec<u8>> = (0..64).map(|i| vec![u8::from(i % 2 == 0)]).collect();
        let initial = mean_loss(&m, &xs, &ys).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            ..Default::default()
        };
        let steps = fit(&mut m, &cfg, &xs, &ys, 200).unwrap();
        assert_eq!(steps, 200);
        let after = mean_loss(&m, &xs, &ys).unwrap();
        assert!(after < initial, "{after} !< {initial}");
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ScorerModel::initialized(FeatureMode::Contextual, 13, &[8, 4], 2, meta(), &mut rng);
        let back = ScorerModel::from_json(&m.to_json()).unwrap();
        for (a, b) in m.layers.iter().zip(&back.layers) {
            for (x, y) in a.w.iter().flatten().zip(b.w.iter().flatten()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_and_inconsistent_files_are_corrupt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ScorerModel::initialized(FeatureMode::Baseline, 4, &[8], 2, meta(), &mut rng);
        let text = m.to_json();
        assert!(matches!(
            ScorerModel::from_json(&text[..text.len() / 2]),
            Err(ModelError::CorruptModel(_))
        ));
        let bad = text.replace("\"task_count\":2", "\"task_count\":3");
        assert!(matches!(ScorerModel::from_json(&bad), Err(ModelError::CorruptModel(_))));
        let old = text.replace("\"version\":1", "\"version\":0");
        assert!(matches!(
            ScorerModel::from_json(&old),
            Err(ModelError::VersionMismatch { found: 0, .. })
        ));
    }
}
