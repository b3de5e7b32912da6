//! Batch privacy scoring and the per-sample baseline it amortizes.
//!
//! The batch pipeline scores a whole test batch T (m records) with n
//! fine-tuned models total, instead of training a fresh set of models per
//! record:
//!
//! 1. Plan n random half-splits of T ([`plan_splits`]).
//! 2. Fine-tune the base model once per split ([`fine_tune_batch`]).
//! 3. For every (model, record) pair run the likelihood-ratio membership
//!    test against the record's shadow out-distribution.
//! 4. A record's privacy score is `|2 * (c_correct / n) - 1|`: how far the
//!    attacker's accuracy on that record sits from coin flipping. 1 means
//!    every model leaked the record's membership; 0 means chance.
//!
//! The per-sample baseline ([`per_sample_baseline`]) measures the same
//! quantity for one record with `n_base` from-scratch trainings; the batch
//! path exists because the baseline's cost scales with m * n_base while the
//! batch needs n fine-tunings regardless of m.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Record};
use crate::lira::{
    self, ConfidenceStatistic, GaussianScope, LiraConfig, LiraError, OutDistribution,
    ShadowEnsemble, fit_gaussian, lira_predict,
};
use crate::model::{ArchSpec, FineTuneStrategy, ModelError, ModelParams, fine_tune, train};
use crate::rng::{self, derive_seed, rng_from_seed};
use crate::util::{csv_field, hex};

use rand::seq::SliceRandom;

/// Default number of fine-tuned models per batch run.
pub const DEFAULT_NUM_MODELS: usize = 128;

/// Default number of from-scratch models per baseline query.
pub const DEFAULT_BASELINE_MODELS: usize = 64;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lira(#[from] LiraError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("fine-tuning model {index} failed: {source}")]
    FineTune {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("baseline model {index} failed: {source}")]
    Baseline {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("record {id} also appears in the shadow population")]
    PopulationOverlap { id: String },
    #[error("cannot parse report: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// How membership sets are balanced inside a split plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Every model trains on exactly `floor(m/2)` records (default).
    #[default]
    RowBalanced,
    /// Every record is a member for exactly `floor(n/2)` models; row sizes
    /// are then binomial around m/2 rather than fixed.
    ColumnBalanced,
}

/// n random membership assignments over an m-record batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    n: usize,
    m: usize,
    master_seed: u64,
    mode: SplitMode,
    /// Row i is model i's membership mask over the batch.
    assignments: Vec<Vec<bool>>,
}

impl SplitPlan {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn mode(&self) -> SplitMode {
        self.mode
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.assignments
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.assignments[i]
    }
}

fn check_plan_shape(m: usize, n: usize) -> Result<()> {
    if m < 2 {
        return Err(ScoringError::InvalidConfig(format!(
            "batch must hold at least 2 records, got {m}"
        )));
    }
    if n < 2 {
        return Err(ScoringError::InvalidConfig(format!(
            "need at least 2 models per batch, got {n}"
        )));
    }
    Ok(())
}

/// Plans n independent membership rows; each row marks exactly `floor(m/2)`
/// of the m records as members, chosen uniformly. Row seeds are derived from
/// `master_seed`, so the plan is a pure function of `(m, n, master_seed)`.
pub fn plan_splits(m: usize, n: usize, master_seed: u64) -> Result<SplitPlan> {
    check_plan_shape(m, n)?;
    let half = m / 2;
    let assignments = (0..n)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(master_seed, rng::domain::SPLIT_ROW, i as u64));
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            let mut row = vec![false; m];
            for &j in idx.iter().take(half) {
                row[j] = true;
            }
            row
        })
        .collect();
    Ok(SplitPlan { n, m, master_seed, mode: SplitMode::RowBalanced, assignments })
}

/// Column-balanced variant: every record is a member for exactly
/// `floor(n/2)` models. Useful when per-record in/out counts must match.
pub fn plan_splits_balanced(m: usize, n: usize, master_seed: u64) -> Result<SplitPlan> {
    check_plan_shape(m, n)?;
    let half = n / 2;
    let mut assignments = vec![vec![false; m]; n];
    for j in 0..m {
        let mut rng = rng_from_seed(derive_seed(master_seed, rng::domain::SPLIT_COLUMN, j as u64));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(half) {
            assignments[i][j] = true;
        }
    }
    Ok(SplitPlan { n, m, master_seed, mode: SplitMode::ColumnBalanced, assignments })
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    ground_truth: Vec<String>,
    predictions: Vec<String>,
}

/// Ground truth and attacker predictions for every (model, record) pair.
/// Row i is a model, column j is a record; `true` means member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct MembershipMatrix {
    ground_truth: Vec<Vec<bool>>,
    predictions: Vec<Vec<bool>>,
}

impl MembershipMatrix {
    pub fn new(ground_truth: Vec<Vec<bool>>, predictions: Vec<Vec<bool>>) -> Result<Self> {
        if ground_truth.is_empty() || ground_truth[0].is_empty() {
            return Err(ScoringError::InvalidConfig("membership matrix cannot be empty".into()));
        }
        let n = ground_truth.len();
        let m = ground_truth[0].len();
        if predictions.len() != n {
            return Err(ScoringError::InvalidConfig(format!(
                "{} prediction rows for {n} ground-truth rows",
                predictions.len()
            )));
        }
        for (i, row) in ground_truth.iter().enumerate() {
            if row.len() != m {
                return Err(ScoringError::InvalidConfig(format!(
                    "ground-truth row {i} has {} columns, expected {m}",
                    row.len()
                )));
            }
        }
        for (i, row) in predictions.iter().enumerate() {
            if row.len() != m {
                return Err(ScoringError::InvalidConfig(format!(
                    "prediction row {i} has {} columns, expected {m}",
                    row.len()
                )));
            }
        }
        Ok(Self { ground_truth, predictions })
    }

    pub fn n(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn m(&self) -> usize {
        self.ground_truth[0].len()
    }

    pub fn ground_truth(&self) -> &[Vec<bool>] {
        &self.ground_truth
    }

    pub fn predictions(&self) -> &[Vec<bool>] {
        &self.predictions
    }

    /// Per record: how many models' membership the attacker called right.
    pub fn correct_counts(&self) -> Vec<usize> {
        let m = self.m();
        let mut counts = vec![0usize; m];
        for (truth, pred) in self.ground_truth.iter().zip(&self.predictions) {
            for j in 0..m {
                if truth[j] == pred[j] {
                    counts[j] += 1;
                }
            }
        }
        counts
    }
}

fn row_to_string(row: &[bool]) -> String {
    row.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn row_from_string(s: &str) -> std::result::Result<Vec<bool>, String> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(format!("invalid matrix character {other:?}")),
        })
        .collect()
}

impl From<MembershipMatrix> for MatrixRepr {
    fn from(m: MembershipMatrix) -> Self {
        MatrixRepr {
            ground_truth: m.ground_truth.iter().map(|r| row_to_string(r)).collect(),
            predictions: m.predictions.iter().map(|r| row_to_string(r)).collect(),
        }
    }
}

impl TryFrom<MatrixRepr> for MembershipMatrix {
    type Error = String;

    fn try_from(r: MatrixRepr) -> std::result::Result<Self, String> {
        let ground_truth = r
            .ground_truth
            .iter()
            .map(|s| row_from_string(s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let predictions = r
            .predictions
            .iter()
            .map(|s| row_from_string(s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        MembershipMatrix::new(ground_truth, predictions).map_err(|e| e.to_string())
    }
}

/// Privacy score from an attack's per-record tally:
/// `|2 * (c_correct / n) - 1|`. 0 is coin flipping, 1 is certain leakage.
pub fn score_from_counts(c_correct: usize, n: usize) -> f64 {
    (2.0 * (c_correct as f64 / n as f64) - 1.0).abs()
}

/// Scores every record of a matrix.
pub fn scores_from_matrix(matrix: &MembershipMatrix) -> Vec<f64> {
    let n = matrix.n();
    matrix.correct_counts().into_iter().map(|c| score_from_counts(c, n)).collect()
}

/// One record's outcome in a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
    pub c_correct: usize,
    pub n: usize,
}

/// Wall-clock accounting for one batch run. Not part of the canonical
/// report bytes: timings vary run to run while scores must not.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub plan_ms: f64,
    pub fine_tune_ms: f64,
    pub predict_ms: f64,
    pub total_ms: f64,
    /// Number of fine-tuning runs performed (always n, independent of m).
    pub fine_tune_count: usize,
}

/// Full outcome of a batch scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyScoreReport {
    /// One entry per record, in test-batch order.
    pub entries: Vec<ScoreEntry>,
    pub matrix: MembershipMatrix,
    pub master_seed: u64,
    /// SHA-256 over the run configuration (model, strategy, ensemble, rule).
    pub config_digest: String,
    pub timings: RunTimings,
}

#[derive(Serialize)]
struct CanonicalReport<'a> {
    entries: &'a [ScoreEntry],
    matrix: MembershipMatrix,
    master_seed: u64,
    config_digest: &'a str,
}

impl PrivacyScoreReport {
    /// Deterministic JSON: excludes timings, so two runs with equal inputs
    /// produce identical bytes.
    pub fn canonical_json(&self) -> String {
        let view = CanonicalReport {
            entries: &self.entries,
            matrix: self.matrix.clone(),
            master_seed: self.master_seed,
            config_digest: &self.config_digest,
        };
        serde_json::to_string_pretty(&view).expect("report serialization cannot fail")
    }

    /// Full JSON including timings.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ScoringError::Parse(e.to_string()))
    }

    /// CSV with header `id,score,c_correct,n`, one row per entry in order.
    /// Scores print with shortest round-trip precision; bytes are stable
    /// across runs with equal inputs.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,score,c_correct,n\n");
        for e in &self.entries {
            out.push_str(&csv_field(&e.id));
            out.push_str(&format!(",{},{},{}\n", e.score, e.c_correct, e.n));
        }
        out
    }
}

/// Knobs of a batch run beyond the model-training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub lira: LiraConfig,
    /// Use [`plan_splits_balanced`] instead of [`plan_splits`].
    pub balanced_columns: bool,
}

/// Progress callbacks out of a batch run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchEvent {
    /// One of the n fine-tuning runs finished.
    ModelFineTuned,
}

/// Fine-tunes one model per plan row: model i trains on exactly the records
/// row i marks as members, in batch order. Seeds derive from the plan's
/// master seed, so the output is schedule-independent.
pub fn fine_tune_batch(
    base: &ModelParams,
    batch: &Dataset,
    plan: &SplitPlan,
    strategy: &FineTuneStrategy,
) -> Result<Vec<ModelParams>> {
    fine_tune_batch_observed(base, batch, plan, strategy, &|_| {})
}

fn fine_tune_batch_observed(
    base: &ModelParams,
    batch: &Dataset,
    plan: &SplitPlan,
    strategy: &FineTuneStrategy,
    observe: &(dyn Fn(BatchEvent) + Sync),
) -> Result<Vec<ModelParams>> {
    if plan.m() != batch.len() {
        return Err(ScoringError::InvalidConfig(format!(
            "plan covers {} records but the batch holds {}",
            plan.m(),
            batch.len()
        )));
    }
    strategy.validate_for(base.arch())?;

    let results: Vec<std::result::Result<ModelParams, ModelError>> = plan
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let indices: Vec<usize> =
                row.iter().enumerate().filter(|&(_, &m)| m).map(|(j, _)| j).collect();
            let subset = batch.subset(&indices).map_err(|e| ModelError::Shape(e.to_string()))?;
            let seed = derive_seed(plan.master_seed(), rng::domain::FINE_TUNE, i as u64);
            let tuned = fine_tune(base, &subset, strategy, seed)?;
            observe(BatchEvent::ModelFineTuned);
            Ok(tuned)
        })
        .collect();

    let mut models = Vec::with_capacity(plan.n());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => models.push(m),
            Err(source) => return Err(ScoringError::FineTune { index, source }),
        }
    }
    Ok(models)
}

/// Scores every record of `test_batch` with n fine-tuned models.
/// See the module docs for the pipeline; `master_seed` pins the whole run.
pub fn score_batch(
    test_batch: &Dataset,
    base: &ModelParams,
    strategy: &FineTuneStrategy,
    ensemble: &ShadowEnsemble,
    config: &BatchConfig,
    n: usize,
    master_seed: u64,
) -> Result<PrivacyScoreReport> {
    score_batch_observed(test_batch, base, strategy, ensemble, config, n, master_seed, &|_| {})
}

/// [`score_batch`] with a progress observer; `observe` fires once per
/// fine-tuned model, from worker threads.
#[allow(clippy::too_many_arguments)]
pub fn score_batch_observed(
    test_batch: &Dataset,
    base: &ModelParams,
    strategy: &FineTuneStrategy,
    ensemble: &ShadowEnsemble,
    config: &BatchConfig,
    n: usize,
    master_seed: u64,
    observe: &(dyn Fn(BatchEvent) + Sync),
) -> Result<PrivacyScoreReport> {
    let start = Instant::now();
    config.lira.validate()?;
    strategy.validate_for(base.arch())?;
    crate::dataset::check_conforms(test_batch, base.arch().input_dim, base.arch().num_classes)?;
    if base.arch().input_dim != ensemble.arch().input_dim
        || base.arch().num_classes != ensemble.arch().num_classes
    {
        return Err(ScoringError::InvalidConfig(format!(
            "base model maps {} features to {} classes but the ensemble maps {} to {}",
            base.arch().input_dim,
            base.arch().num_classes,
            ensemble.arch().input_dim,
            ensemble.arch().num_classes
        )));
    }
    let population = ensemble.population_ids();
    if let Some(r) = test_batch.records().iter().find(|r| population.contains(r.id.as_str())) {
        return Err(ScoringError::PopulationOverlap { id: r.id.clone() });
    }

    let m = test_batch.len();
    let plan_start = Instant::now();
    let plan = if config.balanced_columns {
        plan_splits_balanced(m, n, master_seed)?
    } else {
        plan_splits(m, n, master_seed)?
    };
    let plan_ms = ms_since(plan_start);

    let fine_tune_start = Instant::now();
    let models = fine_tune_batch_observed(base, test_batch, &plan, strategy, observe)?;
    let fine_tune_ms = ms_since(fine_tune_start);

    let predict_start = Instant::now();
    let mode = config.lira.statistic_mode;
    let per_record: Vec<std::result::Result<Vec<f64>, LiraError>> = test_batch
        .records()
        .par_iter()
        .map(|r| ensemble.statistics(r, mode))
        .collect();
    let mut shadow_stats = Vec::with_capacity(m);
    for r in per_record {
        shadow_stats.push(r?);
    }

    let dists: Vec<OutDistribution> = match config.lira.gaussian_scope {
        GaussianScope::PerRecord => shadow_stats
            .iter()
            .map(|stats| fit_gaussian(stats))
            .collect::<std::result::Result<_, _>>()?,
        GaussianScope::Global => {
            let pooled: Vec<f64> = shadow_stats.iter().flatten().copied().collect();
            let global = fit_gaussian(&pooled)?;
            vec![global; m]
        }
    };

    let prediction_rows: Vec<std::result::Result<Vec<bool>, LiraError>> = models
        .par_iter()
        .map(|model| {
            test_batch
                .records()
                .iter()
                .zip(&dists)
                .map(|(r, dist)| {
                    let stat = lira::statistic(model, r, mode)?;
                    Ok(lira_predict(stat, dist, config.lira.alpha))
                })
                .collect()
        })
        .collect();
    let mut predictions = Vec::with_capacity(n);
    for row in prediction_rows {
        predictions.push(row?);
    }
    let predict_ms = ms_since(predict_start);

    let matrix = MembershipMatrix::new(plan.rows().to_vec(), predictions)?;
    let counts = matrix.correct_counts();
    let entries: Vec<ScoreEntry> = test_batch
        .records()
        .iter()
        .zip(&counts)
        .map(|(r, &c)| ScoreEntry {
            id: r.id.clone(),
            score: score_from_counts(c, n),
            c_correct: c,
            n,
        })
        .collect();

    let config_digest = config_digest(base.arch(), strategy, ensemble, config, n, master_seed);
    let timings = RunTimings {
        plan_ms,
        fine_tune_ms,
        predict_ms,
        total_ms: ms_since(start),
        fine_tune_count: models.len(),
    };
    Ok(PrivacyScoreReport { entries, matrix, master_seed, config_digest, timings })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn config_digest(
    arch: &ArchSpec,
    strategy: &FineTuneStrategy,
    ensemble: &ShadowEnsemble,
    config: &BatchConfig,
    n: usize,
    master_seed: u64,
) -> String {
    #[derive(Serialize)]
    struct DigestView<'a> {
        n: usize,
        master_seed: u64,
        balanced_columns: bool,
        lira: &'a LiraConfig,
        strategy: &'a FineTuneStrategy,
        arch: &'a ArchSpec,
        ensemble_digest: String,
    }
    let view = DigestView {
        n,
        master_seed,
        balanced_columns: config.balanced_columns,
        lira: &config.lira,
        strategy,
        arch,
        ensemble_digest: ensemble.digest(),
    };
    let text = serde_json::to_string(&view).expect("digest view serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex(&hasher.finalize())
}

/// Measures one record's leakage the expensive way: `n_base` models trained
/// from scratch on random half-subsets of `context + target`, with the
/// target forced into exactly the first half of them.
///
/// The out-distribution is fitted from the out half's own statistics, the
/// decision rule is the same likelihood-ratio test as the batch path, and
/// the returned score is `|2 * (c_correct / n_base) - 1|`.
pub fn per_sample_baseline(
    target: &Record,
    context: &Dataset,
    arch: &ArchSpec,
    strategy: &FineTuneStrategy,
    lira_config: &LiraConfig,
    n_base: usize,
    seed: u64,
) -> Result<f64> {
    arch.validate()?;
    strategy.validate_for(arch)?;
    lira_config.validate()?;
    if n_base % 2 != 0 || n_base < 4 {
        return Err(ScoringError::InvalidConfig(format!(
            "n_base must be even and at least 4, got {n_base}"
        )));
    }
    if context.len() < 10 {
        return Err(ScoringError::InvalidConfig(format!(
            "baseline context needs at least 10 records, got {}",
            context.len()
        )));
    }
    if target.features.len() != context.dim() {
        return Err(ScoringError::InvalidConfig(format!(
            "target has {} features, context has dimension {}",
            target.features.len(),
            context.dim()
        )));
    }
    if target.label >= context.num_classes() {
        return Err(ScoringError::InvalidConfig(format!(
            "target label {} does not fit the context's {} classes",
            target.label,
            context.num_classes()
        )));
    }
    if context.ids().contains(target.id.as_str()) {
        return Err(ScoringError::InvalidConfig(format!(
            "target {} already appears in the context",
            target.id
        )));
    }
    crate::dataset::check_conforms(context, arch.input_dim, arch.num_classes)?;

    // Half the size of the pool (context plus target).
    let half = (context.len() + 1) / 2;
    let in_models = n_base / 2;
    let mode = lira_config.statistic_mode;

    let results: Vec<std::result::Result<f64, ScoringError>> = (0..n_base)
        .into_par_iter()
        .map(|i| {
            let is_in = i < in_models;
            let sample_seed = derive_seed(seed, rng::domain::BASELINE_SAMPLE, i as u64);
            let train_seed = derive_seed(seed, rng::domain::BASELINE_TRAIN, i as u64);

            let take = if is_in { half - 1 } else { half };
            let mut idx: Vec<usize> = (0..context.len()).collect();
            idx.shuffle(&mut rng_from_seed(sample_seed));
            let mut chosen: Vec<usize> = idx.into_iter().take(take).collect();
            chosen.sort_unstable();

            let mut records: Vec<Record> = Vec::with_capacity(take + usize::from(is_in));
            for &j in &chosen {
                records.push(context.records()[j].clone());
            }
            if is_in {
                records.push(target.clone());
            }
            let subset = Dataset::new(context.dim(), context.num_classes(), records)
                .map_err(ScoringError::Dataset)?;
            let model = train(arch, &subset, strategy, train_seed).map_err(ScoringError::Model)?;
            let stat = lira::statistic(&model, target, mode).map_err(ScoringError::Lira)?;
            Ok(stat.lambda)
        })
        .collect();

    let mut lambdas = Vec::with_capacity(n_base);
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(l) => lambdas.push(l),
            Err(ScoringError::Model(source)) => {
                return Err(ScoringError::Baseline { index, source });
            }
            Err(e) => return Err(e),
        }
    }

    let dist = fit_gaussian(&lambdas[in_models..])?;
    let mut correct = 0usize;
    for (i, &lambda) in lambdas.iter().enumerate() {
        let is_in = i < in_models;
        let pred = lira_predict(ConfidenceStatistic { lambda }, &dist, lira_config.alpha);
        if pred == is_in {
            correct += 1;
        }
    }
    Ok(score_from_counts(correct, n_base))
}

/// Agreement measures between two score vectors over the same records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComparison {
    /// Linear correlation; `None` when either side has zero variance.
    pub pearson: Option<f64>,
    /// Rank correlation with average ranks on ties; `None` when either
    /// side's ranks have zero variance.
    pub spearman: Option<f64>,
    pub mean_abs_diff: f64,
}

/// Compares paired scores. Requires equal lengths, at least 3 pairs, and
/// finite values.
pub fn compare_scores(a: &[f64], b: &[f64]) -> Result<ScoreComparison> {
    if a.len() != b.len() {
        return Err(ScoringError::InvalidConfig(format!(
            "score vectors have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(ScoringError::InvalidConfig(format!(
            "need at least 3 paired scores, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(ScoringError::InvalidConfig("scores must be finite".into()));
    }
    let mean_abs_diff =
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(ScoreComparison {
        pearson: pearson(a, b),
        spearman: pearson(&average_ranks(a), &average_ranks(b)),
        mean_abs_diff,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// 1-based ranks; tied values share the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut pos = 0;
    while pos < order.len() {
        let mut end = pos + 1;
        while end < order.len() && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // positions pos..end are one tie group; ranks are 1-based
        let avg = (pos + 1 + end) as f64 / 2.0;
        for &i in &order[pos..end] {
            ranks[i] = avg;
        }
        pos = end;
    }
    ranks
}
