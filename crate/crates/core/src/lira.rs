//! Offline likelihood-ratio membership test.
//!
//! The attacker never trains on the target record. Instead it fits a
//! Gaussian to the confidence statistic of `k` shadow models that exclude
//! the record ("out" models), then flags the record as a training member
//! when the observed statistic sits improbably far in the upper tail.
//!
//! The statistic is the log-odds of the target class,
//! `lambda = log(p / (1 - p))`, computed directly in logit space so extreme
//! confidences stay finite and binary problems are handled exactly.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError, Record};
use crate::model::{
    ArchSpec, FineTuneStrategy, ModelError, ModelParams, PROB_FLOOR, logsumexp, train,
};
use crate::rng::{self, derive_seed};

/// Fitted standard deviations never drop below this floor, so z-scores stay
/// finite even when every shadow statistic coincides.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default number of shadow models in an ensemble.
pub const DEFAULT_SHADOW_COUNT: usize = 256;

/// Default fraction of the population each shadow model trains on.
pub const DEFAULT_SUBSAMPLE_FRACTION: f64 = 0.5;

/// Largest magnitude of the confidence statistic: the log-odds at the
/// probability clamp bounds, `ln((1 - PROB_FLOOR) / PROB_FLOOR)`, about 27.6.
pub fn lambda_clamp() -> f64 {
    ((1.0 - PROB_FLOOR) / PROB_FLOOR).ln()
}

#[derive(Debug, Error)]
pub enum LiraError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("shadow model {index} failed: {source}")]
    ShadowTraining {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("need at least 2 statistics to fit a Gaussian, got {0}")]
    NotEnoughStats(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse ensemble: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LiraError>;

/// Log-odds of the target class under one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStatistic {
    pub lambda: f64,
}

/// Which class the statistic targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticMode {
    /// Log-odds of the record's own label.
    #[default]
    TrueLabel,
    /// Log-odds of the model's most probable class (ties pick the lowest
    /// class index). For binary problems this equals the absolute value of
    /// the true-label statistic, bit for bit.
    MaxClass,
}

/// Whether out-distributions are fitted per record or pooled over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianScope {
    #[default]
    PerRecord,
    Global,
}

/// Decision-rule parameters shared by every membership query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiraConfig {
    /// One-sided significance level in (0, 1). At the default 0.5 the rule
    /// reduces to "statistic above the out-distribution mean".
    pub alpha: f64,
    pub statistic_mode: StatisticMode,
    pub gaussian_scope: GaussianScope,
}

impl Default for LiraConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            statistic_mode: StatisticMode::TrueLabel,
            gaussian_scope: GaussianScope::PerRecord,
        }
    }
}

impl LiraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LiraError::InvalidConfig(format!(
                "alpha must lie strictly between 0 and 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Gaussian fitted to out-model statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl OutDistribution {
    /// `sigma` is floored at [`SIGMA_FLOOR`]; both moments must be finite.
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(LiraError::InvalidConfig(format!(
                "out-distribution moments must be finite with sigma >= 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma: sigma.max(SIGMA_FLOOR) })
    }
}

/// Computes the confidence statistic of `record` under `model`.
///
/// In logit space: `lambda = z_t - logsumexp(z_j, j != t)` where `t` is the
/// target class, clamped to `[-lambda_clamp(), lambda_clamp()]`. This equals
/// `log(p_t / (1 - p_t))` for the softmax probability `p_t`, without ever
/// forming probabilities that would round to 0 or 1.
pub fn statistic(
    model: &ModelParams,
    record: &Record,
    mode: StatisticMode,
) -> Result<ConfidenceStatistic> {
    let logits = model.logits(&record.features)?;
    let target = match mode {
        StatisticMode::TrueLabel => {
            if record.label >= logits.len() {
                return Err(LiraError::Model(ModelError::Shape(format!(
                    "record {} has label {} but the model only has {} classes",
                    record.id,
                    record.label,
                    logits.len()
                ))));
            }
            record.label
        }
        StatisticMode::MaxClass => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            best
        }
    };
    let rest: Vec<f64> =
        logits.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, &z)| z).collect();
    let bound = lambda_clamp();
    let lambda = (logits[target] - logsumexp(&rest)).clamp(-bound, bound);
    Ok(ConfidenceStatistic { lambda })
}

/// Fits a Gaussian with the sample (k-1) variance; sigma is floored.
pub fn fit_gaussian(stats: &[f64]) -> Result<OutDistribution> {
    if stats.len() < 2 {
        return Err(LiraError::NotEnoughStats(stats.len()));
    }
    if stats.iter().any(|s| !s.is_finite()) {
        return Err(LiraError::InvalidConfig("cannot fit a Gaussian to non-finite statistics".into()));
    }
    let n = stats.len() as f64;
    let mu = stats.iter().sum::<f64>() / n;
    let ss = stats.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>();
    let sigma = (ss / (n - 1.0)).sqrt();
    OutDistribution::new(mu, sigma)
}

/// Standard normal CDF through the complementary error function:
/// `Phi(z) = erfc(-z / sqrt(2)) / 2`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sided membership decision. The record is called a member when the
/// upper-tail probability of its statistic under `dist` falls below `alpha`:
/// `1 - Phi((lambda - mu) / sigma) < alpha`. Ties favor non-membership, so
/// at `alpha = 0.5` a statistic exactly at the mean is a non-member.
pub fn lira_predict(stat: ConfidenceStatistic, dist: &OutDistribution, alpha: f64) -> bool {
    let z = (stat.lambda - dist.mu) / dist.sigma;
    let p_upper = 1.0 - normal_cdf(z);
    p_upper < alpha
}

/// Everything needed to reproduce or audit an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub master_seed: u64,
    pub subsample_fraction: f64,
    pub strategy: FineTuneStrategy,
    pub population_digest: String,
    /// Ids of the population the shadows were drawn from, in dataset order.
    /// Batch scoring uses these to refuse records the shadows may have seen.
    pub population_ids: Vec<String>,
    pub sample_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
}

/// `k` models trained on random half-subsets of a population the target
/// records never touch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEnsemble {
    arch: ArchSpec,
    models: Vec<ModelParams>,
    provenance: EnsembleProvenance,
}

impl ShadowEnsemble {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }

    pub fn provenance(&self) -> &EnsembleProvenance {
        &self.provenance
    }

    pub fn population_ids(&self) -> BTreeSet<&str> {
        self.provenance.population_ids.iter().map(String::as_str).collect()
    }

    /// Statistic of `record` under every shadow model, in model order.
    pub fn statistics(&self, record: &Record, mode: StatisticMode) -> Result<Vec<f64>> {
        self.models.iter().map(|m| Ok(statistic(m, record, mode)?.lambda)).collect()
    }

    /// Stable identity of the ensemble: SHA-256 over its size, architecture,
    /// and provenance. Training is deterministic, so this pins the weights
    /// without hashing them.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct DigestView<'a> {
            k: usize,
            arch: &'a ArchSpec,
            provenance: &'a EnsembleProvenance,
        }
        let view = DigestView { k: self.models.len(), arch: &self.arch, provenance: &self.provenance };
        let text = serde_json::to_string(&view).expect("digest view serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        crate::util::hex(&hasher.finalize())
    }

    /// Writes `manifest.json` plus one model file per shadow into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|source| LiraError::Io { path: dir.display().to_string(), source })?;
        let model_files: Vec<String> =
            (0..self.models.len()).map(|i| format!("model_{i:05}.json")).collect();
        for (file, model) in model_files.iter().zip(&self.models) {
            model.save(dir.join(file))?;
        }
        let manifest = Manifest {
            format: ENSEMBLE_FORMAT.to_string(),
            k: self.models.len(),
            arch: self.arch.clone(),
            provenance: self.provenance.clone(),
            model_files,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .expect("manifest serialization cannot fail");
        std::fs::write(&path, text)
            .map_err(|source| LiraError::Io { path: path.display().to_string(), source })
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|source| LiraError::Io { path: path.display().to_string(), source })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| LiraError::Parse(e.to_string()))?;
        if manifest.format != ENSEMBLE_FORMAT {
            return Err(LiraError::Parse(format!(
                "unsupported ensemble format {:?}, expected {ENSEMBLE_FORMAT:?}",
                manifest.format
            )));
        }
        if manifest.model_files.len() != manifest.k {
            return Err(LiraError::Parse(format!(
                "manifest lists {} model files for k={}",
                manifest.model_files.len(),
                manifest.k
            )));
        }
        let mut models = Vec::with_capacity(manifest.k);
        for file in &manifest.model_files {
            let m = ModelParams::load(dir.join(file))?;
            if m.arch() != &manifest.arch {
                return Err(LiraError::Parse(format!(
                    "model {file} does not match the manifest architecture"
                )));
            }
            models.push(m);
        }
        Self::from_parts(manifest.arch, models, manifest.provenance)
    }

    /// Assembles an ensemble from already trained parts, enforcing `k >= 2`
    /// and a single shared architecture.
    pub fn from_parts(
        arch: ArchSpec,
        models: Vec<ModelParams>,
        provenance: EnsembleProvenance,
    ) -> Result<Self> {
        if models.len() < 2 {
            return Err(LiraError::InvalidConfig(format!(
                "an ensemble needs at least 2 shadow models, got {}",
                models.len()
            )));
        }
        if let Some(bad) = models.iter().position(|m| m.arch() != &arch) {
            return Err(LiraError::InvalidConfig(format!(
                "shadow model {bad} does not share the ensemble architecture"
            )));
        }
        Ok(Self { arch, models, provenance })
    }
}

const ENSEMBLE_FORMAT: &str = "privscore-ensemble-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    k: usize,
    arch: ArchSpec,
    provenance: EnsembleProvenance,
    model_files: Vec<String>,
}

/// Trains `k` shadow models, each on an independent random subsample of
/// `population` holding `floor(subsample_fraction * n)` records.
///
/// Per-model seeds are derived from `seed` up front, so the result is
/// identical however the models are scheduled across threads. Errors
/// surface for the lowest failing model index.
pub fn prepare_shadow_ensemble(
    arch: &ArchSpec,
    population: &Dataset,
    k: usize,
    subsample_fraction: f64,
    strategy: &FineTuneStrategy,
    seed: u64,
) -> Result<ShadowEnsemble> {
    arch.validate()?;
    strategy.validate_for(arch)?;
    if k < 2 {
        return Err(LiraError::InvalidConfig(format!(
            "an ensemble needs at least 2 shadow models, got {k}"
        )));
    }
    if population.is_empty() {
        return Err(LiraError::Dataset(DatasetError::Empty));
    }
    if !(subsample_fraction.is_finite() && subsample_fraction > 0.0 && subsample_fraction < 1.0) {
        return Err(LiraError::Dataset(DatasetError::BadFraction(subsample_fraction)));
    }
    if (subsample_fraction * population.len() as f64).floor() < 1.0 {
        return Err(LiraError::InvalidConfig(format!(
            "subsample of {} records at fraction {subsample_fraction} is empty",
            population.len()
        )));
    }

    let sample_seeds: Vec<u64> =
        (0..k).map(|i| derive_seed(seed, rng::domain::SHADOW_SAMPLE, i as u64)).collect();
    let train_seeds: Vec<u64> =
        (0..k).map(|i| derive_seed(seed, rng::domain::SHADOW_TRAIN, i as u64)).collect();

    let results: Vec<std::result::Result<ModelParams, ModelError>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let (subset, _) = dataset::split(population, subsample_fraction, sample_seeds[i])
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            train(arch, &subset, strategy, train_seeds[i])
        })
        .collect();

    let mut models = Vec::with_capacity(k);
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => models.push(m),
            Err(source) => return Err(LiraError::ShadowTraining { index, source }),
        }
    }

    let provenance = EnsembleProvenance {
        master_seed: seed,
        subsample_fraction,
        strategy: strategy.clone(),
        population_digest: population.digest(),
        population_ids: population.records().iter().map(|r| r.id.clone()).collect(),
        sample_seeds,
        train_seeds,
    };
    ShadowEnsemble::from_parts(arch.clone(), models, provenance)
}

/// Fits the out-distribution of `record`: the Gaussian over its statistic
/// across every model of the ensemble.
pub fn fit_out_distribution(
    ensemble: &ShadowEnsemble,
    record: &Record,
    mode: StatisticMode,
) -> Result<OutDistribution> {
    let stats = ensemble.statistics(record, mode)?;
    fit_gaussian(&stats)
}
