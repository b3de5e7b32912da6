//! Small dense classifiers trained with plain SGD.
//!
//! Capacity is deliberately modest (logistic regression or an MLP with a few
//! hidden layers) because the scoring pipeline trains hundreds of these per
//! run. Everything is f64 and allocation-light; a training run is a pure
//! function of (architecture, data, strategy, seed).
//!
//! Weight layout: layers are stored back to back in one flat vector. Layer
//! `l` mapping `in` activations to `out` contributes `out * in` weights in
//! row-major order (output index major) followed by `out` biases.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Record};
use crate::rng::{SeededRng, rng_from_seed};

/// Probabilities out of [`ModelParams::predict_proba`] are clamped into
/// `[PROB_FLOOR, 1 - PROB_FLOOR]` so downstream log-ratios stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

const MODEL_FORMAT: &str = "privscore-model-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training strategy: {0}")]
    InvalidStrategy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot parse model: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Network shape: `input_dim -> hidden_layers... -> num_classes`.
/// An empty `hidden_layers` is multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidArch("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidArch(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(ModelError::InvalidArch("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` pairs, one per layer, in forward order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_layers {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_layers.len() + 1
    }

    /// Total parameter count: weights plus biases over all layers.
    pub fn weight_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| (i + 1) * o).sum()
    }
}

/// How SGD runs, for both from-scratch training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneStrategy {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Layer indices whose parameters are never updated.
    pub frozen_layers: BTreeSet<usize>,
    /// Coefficient of the `l2/2 * sum(w^2)` penalty over trainable
    /// parameters. Frozen layers are outside the objective's penalty term.
    pub l2_penalty: f64,
    pub shuffle_per_epoch: bool,
}

impl Default for FineTuneStrategy {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.05,
            batch_size: 32,
            frozen_layers: BTreeSet::new(),
            l2_penalty: 0.0,
            shuffle_per_epoch: true,
        }
    }
}

impl FineTuneStrategy {
    /// A learning rate of zero is allowed (it makes training the identity,
    /// which is useful as a control); negative or non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidStrategy("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidStrategy(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidStrategy("batch_size must be >= 1".into()));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(ModelError::InvalidStrategy(format!(
                "l2_penalty must be finite and >= 0, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, arch: &ArchSpec) -> Result<()> {
        self.validate()?;
        if let Some(&bad) = self.frozen_layers.iter().find(|&&l| l >= arch.num_layers()) {
            return Err(ModelError::InvalidStrategy(format!(
                "frozen layer {bad} does not exist (model has {} layers)",
                arch.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct LayerView {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

fn layer_views(arch: &ArchSpec) -> Vec<LayerView> {
    let mut views = Vec::with_capacity(arch.num_layers());
    let mut off = 0;
    for (in_dim, out_dim) in arch.layer_dims() {
        views.push(LayerView { w_off: off, b_off: off + in_dim * out_dim, in_dim, out_dim });
        off += (in_dim + 1) * out_dim;
    }
    views
}

/// A trained model: architecture plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchSpec,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ArchSpec, weights: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.weight_count() {
            return Err(ModelError::Shape(format!(
                "{} weights supplied, architecture needs {}",
                weights.len(),
                arch.weight_count()
            )));
        }
        Ok(Self { arch, weights })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let n = arch.weight_count();
        Self::new(arch, vec![0.0; n])
    }

    /// Xavier-uniform weights (`+/- sqrt(6 / (fan_in + fan_out))`), zero
    /// biases. Weight draw order is layer by layer, row-major, so the
    /// initialization is pinned by the generator state.
    pub fn xavier_init(arch: ArchSpec, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let mut weights = vec![0.0; arch.weight_count()];
        for lv in layer_views(&arch) {
            let bound = (6.0 / (lv.in_dim + lv.out_dim) as f64).sqrt();
            for w in &mut weights[lv.w_off..lv.w_off + lv.in_dim * lv.out_dim] {
                *w = rng.random_range(-bound..=bound);
            }
            // biases stay zero
        }
        Self::new(arch, weights)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Raw class scores before the softmax.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.arch.input_dim {
            return Err(ModelError::Shape(format!(
                "input has {} features, model expects {}",
                features.len(),
                self.arch.input_dim
            )));
        }
        let views = layer_views(&self.arch);
        let last = views.len() - 1;
        let mut a = features.to_vec();
        for (l, lv) in views.iter().enumerate() {
            let mut z = vec![0.0; lv.out_dim];
            for o in 0..lv.out_dim {
                let row = &self.weights[lv.w_off + o * lv.in_dim..lv.w_off + (o + 1) * lv.in_dim];
                let mut acc = self.weights[lv.b_off + o];
                for (w, x) in row.iter().zip(&a) {
                    acc += w * x;
                }
                z[o] = acc;
            }
            if l < last {
                for v in &mut z {
                    *v = self.arch.activation.apply(*v);
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Class probabilities via a max-shifted softmax, each clamped into
    /// `[PROB_FLOOR, 1 - PROB_FLOOR]`. A zero-weight model returns the
    /// uniform vector.
    pub fn predict_proba(&self, record: &Record) -> Result<Vec<f64>> {
        let logits = self.logits(&record.features)?;
        let mut probs = softmax(&logits);
        for p in &mut probs {
            *p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        }
        Ok(probs)
    }

    /// Compact JSON text: format tag, architecture, flat weights. Weights are
    /// printed with shortest-round-trip precision, so text -> parse -> text
    /// is byte-stable.
    pub fn to_text(&self) -> String {
        let raw = RawModel {
            format: MODEL_FORMAT.to_string(),
            arch: self.arch.clone(),
            weights: self.weights.clone(),
        };
        serde_json::to_string(&raw).expect("model serialization cannot fail")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let raw: RawModel =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        if raw.format != MODEL_FORMAT {
            return Err(ModelError::Parse(format!(
                "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
                raw.format
            )));
        }
        if raw.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Parse("model contains non-finite weights".into()));
        }
        Self::new(raw.arch, raw.weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text())
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    format: String,
    arch: ArchSpec,
    weights: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(z)))` with the usual max shift.
pub fn logsumexp(zs: &[f64]) -> f64 {
    let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + zs.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

struct Workspace {
    views: Vec<LayerView>,
    /// Activations per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn for_arch(arch: &ArchSpec) -> Self {
        let views = layer_views(arch);
        let mut acts = Vec::with_capacity(views.len() + 1);
        acts.push(vec![0.0; arch.input_dim]);
        for lv in &views {
            acts.push(vec![0.0; lv.out_dim]);
        }
        let widest = acts.iter().map(Vec::len).max().unwrap_or(1);
        Self { views, acts, delta: vec![0.0; widest], delta_prev: vec![0.0; widest] }
    }
}

/// Forward pass storing activations, returns the cross-entropy of `record`.
fn forward(m: &ModelParams, record: &Record, ws: &mut Workspace) -> f64 {
    let last = ws.views.len() - 1;
    ws.acts[0].copy_from_slice(&record.features);
    for l in 0..ws.views.len() {
        let lv = ws.views[l];
        let (input, output) = ws.acts.split_at_mut(l + 1);
        let a = &input[l];
        let z = &mut output[0];
        for o in 0..lv.out_dim {
            let row = &m.weights[lv.w_off + o * lv.in_dim..lv.w_off + (o + 1) * lv.in_dim];
            let mut acc = m.weights[lv.b_off + o];
            for (w, x) in row.iter().zip(a.iter()) {
                acc += w * x;
            }
            z[o] = if l < last { m.arch.activation.apply(acc) } else { acc };
        }
    }
    let logits = &ws.acts[ws.views.len()];
    logsumexp(logits) - logits[record.label]
}

/// Backward pass; accumulates `d(cross entropy)/d(weights)` into `grad`.
fn backward(m: &ModelParams, record: &Record, ws: &mut Workspace, grad: &mut [f64]) {
    let num_layers = ws.views.len();
    let logits = &ws.acts[num_layers];
    let probs = softmax(logits);
    for (o, p) in probs.iter().enumerate() {
        ws.delta[o] = p - if o == record.label { 1.0 } else { 0.0 };
    }
    for l in (0..num_layers).rev() {
        let lv = ws.views[l];
        let a_in = &ws.acts[l];
        for o in 0..lv.out_dim {
            let d = ws.delta[o];
            let g_row = &mut grad[lv.w_off + o * lv.in_dim..lv.w_off + (o + 1) * lv.in_dim];
            for (g, x) in g_row.iter_mut().zip(a_in.iter()) {
                *g += d * x;
            }
            grad[lv.b_off + o] += d;
        }
        if l > 0 {
            for i in 0..lv.in_dim {
                let mut acc = 0.0;
                for o in 0..lv.out_dim {
                    acc += m.weights[lv.w_off + o * lv.in_dim + i] * ws.delta[o];
                }
                let act_out = ws.acts[l][i];
                ws.delta_prev[i] = acc * m.arch.activation.derivative_from_output(act_out);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
}

/// Parameter indices excluded from updates (and from the penalty term).
fn frozen_coords(arch: &ArchSpec, frozen_layers: &BTreeSet<usize>) -> Vec<bool> {
    let mut frozen = vec![false; arch.weight_count()];
    for (l, lv) in layer_views(arch).iter().enumerate() {
        if frozen_layers.contains(&l) {
            for f in &mut frozen[lv.w_off..lv.w_off + (lv.in_dim + 1) * lv.out_dim] {
                *f = true;
            }
        }
    }
    frozen
}

/// Objective value on `data`: mean cross entropy plus
/// `l2/2 * sum(w^2)` over trainable (non-frozen) parameters.
pub fn penalized_loss(m: &ModelParams, data: &Dataset, strategy: &FineTuneStrategy) -> Result<f64> {
    check_data(m.arch(), data)?;
    strategy.validate_for(m.arch())?;
    let mut ws = Workspace::for_arch(m.arch());
    let mut total = 0.0;
    for r in data.records() {
        total += forward(m, r, &mut ws);
    }
    let mut loss = total / data.len() as f64;
    if strategy.l2_penalty > 0.0 {
        let frozen = frozen_coords(m.arch(), &strategy.frozen_layers);
        let sq: f64 = m
            .weights
            .iter()
            .zip(&frozen)
            .filter(|&(_, &f)| !f)
            .map(|(w, _)| w * w)
            .sum();
        loss += 0.5 * strategy.l2_penalty * sq;
    }
    Ok(loss)
}

/// Objective value and its gradient with respect to every parameter.
/// Frozen parameters still get their true cross-entropy gradient (the
/// penalty simply excludes them); the SGD loop is what skips their updates.
pub fn loss_gradient(
    m: &ModelParams,
    data: &Dataset,
    strategy: &FineTuneStrategy,
) -> Result<(f64, Vec<f64>)> {
    check_data(m.arch(), data)?;
    strategy.validate_for(m.arch())?;
    let frozen = frozen_coords(m.arch(), &strategy.frozen_layers);
    let mut ws = Workspace::for_arch(m.arch());
    let mut grad = vec![0.0; m.weights.len()];
    let mut total = 0.0;
    for r in data.records() {
        total += forward(m, r, &mut ws);
        backward(m, r, &mut ws, &mut grad);
    }
    let inv = 1.0 / data.len() as f64;
    let mut loss = total * inv;
    for g in &mut grad {
        *g *= inv;
    }
    if strategy.l2_penalty > 0.0 {
        let mut sq = 0.0;
        for (i, w) in m.weights.iter().enumerate() {
            if !frozen[i] {
                sq += w * w;
                grad[i] += strategy.l2_penalty * w;
            }
        }
        loss += 0.5 * strategy.l2_penalty * sq;
    }
    Ok((loss, grad))
}

fn check_data(arch: &ArchSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    crate::dataset::check_conforms(data, arch.input_dim, arch.num_classes)
        .map_err(|e| ModelError::Shape(e.to_string()))
}

fn sgd(
    mut m: ModelParams,
    data: &Dataset,
    strategy: &FineTuneStrategy,
    rng: &mut SeededRng,
) -> Result<ModelParams> {
    let frozen = frozen_coords(m.arch(), &strategy.frozen_layers);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut ws = Workspace::for_arch(m.arch());
    let mut grad = vec![0.0; m.weights.len()];

    for epoch in 0..strategy.epochs {
        if strategy.shuffle_per_epoch {
            order.shuffle(rng);
        }
        for (batch_idx, chunk) in order.chunks(strategy.batch_size).enumerate() {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let r = &data.records()[i];
                batch_loss += forward(&m, r, &mut ws);
                backward(&m, r, &mut ws, &mut grad);
            }
            let inv = 1.0 / chunk.len() as f64;
            batch_loss *= inv;
            for g in &mut grad {
                *g *= inv;
            }
            if strategy.l2_penalty > 0.0 {
                let mut sq = 0.0;
                for (i, w) in m.weights.iter().enumerate() {
                    if !frozen[i] {
                        sq += w * w;
                        grad[i] += strategy.l2_penalty * w;
                    }
                }
                batch_loss += 0.5 * strategy.l2_penalty * sq;
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            for (i, w) in m.weights.iter_mut().enumerate() {
                if !frozen[i] {
                    *w -= strategy.learning_rate * grad[i];
                }
            }
        }
    }
    Ok(m)
}

/// Trains from Xavier-initialized weights. The seed pins both the
/// initialization and the epoch shuffles.
pub fn train(
    arch: &ArchSpec,
    data: &Dataset,
    strategy: &FineTuneStrategy,
    seed: u64,
) -> Result<ModelParams> {
    arch.validate()?;
    strategy.validate_for(arch)?;
    check_data(arch, data)?;
    let mut rng = rng_from_seed(seed);
    let init = ModelParams::xavier_init(arch.clone(), &mut rng)?;
    sgd(init, data, strategy, &mut rng)
}

/// Continues SGD from an existing model's weights. With `learning_rate == 0`
/// the result equals `base` exactly.
pub fn fine_tune(
    base: &ModelParams,
    data: &Dataset,
    strategy: &FineTuneStrategy,
    seed: u64,
) -> Result<ModelParams> {
    strategy.validate_for(base.arch())?;
    check_data(base.arch(), data)?;
    let mut rng = rng_from_seed(seed);
    sgd(base.clone(), data, strategy, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{self, SyntheticSpec};

    fn blobs(n: usize, seed: u64) -> Dataset {
        dataset::generate(&SyntheticSpec {
            num_classes: 2,
            dim: 2,
            class_means: vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
            cov_scale: 1.0,
            outlier_fraction: 0.0,
            num_records: n,
            seed,
        })
        .unwrap()
    }

    fn logistic_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 2,
            hidden_layers: vec![],
            num_classes: 2,
            activation: Activation::Relu,
        }
    }

    fn mlp_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 2,
            hidden_layers: vec![8],
            num_classes: 2,
            activation: Activation::Relu,
        }
    }

    fn accuracy(m: &ModelParams, data: &Dataset) -> f64 {
        let hits = data
            .records()
            .iter()
            .filter(|r| {
                let p = m.predict_proba(r).unwrap();
                let pred = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                pred == r.label
            })
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let m = ModelParams::zeros(logistic_arch()).unwrap();
        let r = Record { id: "a".into(), features: vec![0.3, -1.2], label: 0 };
        assert_eq!(m.predict_proba(&r).unwrap(), vec![0.5, 0.5]);

        let m3 = ModelParams::zeros(ArchSpec {
            input_dim: 2,
            hidden_layers: vec![],
            num_classes: 3,
            activation: Activation::Relu,
        })
        .unwrap();
        let probs = m3.predict_proba(&r).unwrap();
        assert_eq!(probs, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn training_separates_blobs() {
        let data = blobs(200, 5);
        let strategy = FineTuneStrategy { epochs: 20, learning_rate: 0.2, ..Default::default() };
        let m = train(&logistic_arch(), &data, &strategy, 1).unwrap();
        assert!(accuracy(&m, &data) >= 0.95, "accuracy {}", accuracy(&m, &data));
    }

    #[test]
    fn mlp_training_separates_blobs() {
        let data = blobs(200, 6);
        let strategy = FineTuneStrategy { epochs: 30, learning_rate: 0.2, ..Default::default() };
        let m = train(&mlp_arch(), &data, &strategy, 2).unwrap();
        assert!(accuracy(&m, &data) >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(100, 7);
        let strategy = FineTuneStrategy::default();
        let a = train(&mlp_arch(), &data, &strategy, 3).unwrap();
        let b = train(&mlp_arch(), &data, &strategy, 3).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = train(&mlp_arch(), &data, &strategy, 4).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn zero_learning_rate_fine_tune_is_identity() {
        let data = blobs(50, 8);
        let base = train(&mlp_arch(), &data, &FineTuneStrategy::default(), 9).unwrap();
        let strategy = FineTuneStrategy { epochs: 1, learning_rate: 0.0, ..Default::default() };
        let tuned = fine_tune(&base, &data, &strategy, 10).unwrap();
        assert_eq!(tuned.weights(), base.weights());
    }

    #[test]
    fn fine_tune_moves_weights_with_positive_rate() {
        let data = blobs(50, 8);
        let base = train(&mlp_arch(), &data, &FineTuneStrategy::default(), 9).unwrap();
        let tuned = fine_tune(&base, &data, &FineTuneStrategy::default(), 10).unwrap();
        assert_ne!(tuned.weights(), base.weights());
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let data = blobs(50, 12);
        let base = train(&mlp_arch(), &data, &FineTuneStrategy::default(), 13).unwrap();
        let strategy = FineTuneStrategy {
            frozen_layers: BTreeSet::from([0]),
            ..Default::default()
        };
        let tuned = fine_tune(&base, &data, &strategy, 14).unwrap();
        let views = layer_views(base.arch());
        let first = views[0];
        let span = (first.in_dim + 1) * first.out_dim;
        assert_eq!(&tuned.weights()[..span], &base.weights()[..span]);
        assert_ne!(&tuned.weights()[span..], &base.weights()[span..]);
    }

    #[test]
    fn frozen_layer_out_of_range_is_rejected() {
        let data = blobs(20, 15);
        let strategy = FineTuneStrategy {
            frozen_layers: BTreeSet::from([5]),
            ..Default::default()
        };
        assert!(matches!(
            train(&mlp_arch(), &data, &strategy, 1),
            Err(ModelError::InvalidStrategy(_))
        ));
    }

    #[test]
    fn strategy_validation() {
        let bad = FineTuneStrategy { epochs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FineTuneStrategy { learning_rate: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FineTuneStrategy { learning_rate: f64::NAN, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FineTuneStrategy { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let ok = FineTuneStrategy { learning_rate: 0.0, ..Default::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn oversized_batch_acts_as_full_batch() {
        let data = blobs(10, 16);
        let strategy = FineTuneStrategy {
            batch_size: 1000,
            epochs: 3,
            shuffle_per_epoch: false,
            ..Default::default()
        };
        let m = train(&logistic_arch(), &data, &strategy, 17).unwrap();
        // One batch per epoch: 3 full-batch steps, must match a manual run.
        let mut rng = rng_from_seed(17);
        let mut manual = ModelParams::xavier_init(logistic_arch(), &mut rng).unwrap();
        for _ in 0..3 {
            let (_, g) = loss_gradient(&manual, &data, &strategy).unwrap();
            let mut w = manual.weights().to_vec();
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= strategy.learning_rate * gi;
            }
            manual = ModelParams::new(manual.arch().clone(), w).unwrap();
        }
        assert_eq!(m.weights(), manual.weights());
    }

    #[test]
    fn divergent_training_reports_non_finite_loss() {
        let data = blobs(50, 18);
        let strategy = FineTuneStrategy { learning_rate: 1e308, epochs: 5, ..Default::default() };
        match train(&mlp_arch(), &data, &strategy, 19) {
            Err(ModelError::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn probabilities_are_clamped_and_normalized() {
        let data = blobs(100, 20);
        let m = train(
            &logistic_arch(),
            &data,
            &FineTuneStrategy { epochs: 50, learning_rate: 1.0, ..Default::default() },
            21,
        )
        .unwrap();
        for r in data.records() {
            let p = m.predict_proba(r).unwrap();
            assert!(p.iter().all(|&v| (PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&v)));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trips_bitwise() {
        let data = blobs(50, 22);
        let m = train(&mlp_arch(), &data, &FineTuneStrategy::default(), 23).unwrap();
        let text = m.to_text();
        let back = ModelParams::from_text(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn serialization_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = ModelParams::zeros(mlp_arch()).unwrap();
        m.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), m);
    }

    #[test]
    fn parse_rejects_corrupt_models() {
        assert!(ModelParams::from_text("not json").is_err());
        let m = ModelParams::zeros(logistic_arch()).unwrap();
        let text = m.to_text();
        let wrong_format = text.replace("privscore-model-v1", "other-format");
        assert!(ModelParams::from_text(&wrong_format).is_err());
        let truncated = text.replace("[0.0,", "[");
        assert!(ModelParams::from_text(&truncated).is_err());
    }

    #[test]
    fn weight_count_matches_layout() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden_layers: vec![4, 5],
            num_classes: 2,
            activation: Activation::Tanh,
        };
        // (3+1)*4 + (4+1)*5 + (5+1)*2 = 16 + 25 + 12
        assert_eq!(arch.weight_count(), 53);
        assert_eq!(arch.layer_dims(), vec![(3, 4), (4, 5), (5, 2)]);
    }

    #[test]
    fn mismatched_input_dim_is_an_error() {
        let m = ModelParams::zeros(logistic_arch()).unwrap();
        let r = Record { id: "a".into(), features: vec![1.0, 2.0, 3.0], label: 0 };
        assert!(matches!(m.predict_proba(&r), Err(ModelError::Shape(_))));
    }
}
