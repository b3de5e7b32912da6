//! Shared fixtures for the service integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use privscore_core::dataset::{self, Record, SyntheticSpec};
use privscore_core::model::{Activation, ArchSpec, FineTuneStrategy, ModelParams};
use privscore_core::rng::rng_from_seed;

pub const JOB_TIMEOUT: Duration = Duration::from_secs(120);

pub fn arch() -> ArchSpec {
    ArchSpec {
        input_dim: 2,
        hidden_layers: vec![],
        num_classes: 2,
        activation: Activation::Relu,
    }
}

pub fn quick_strategy() -> FineTuneStrategy {
    FineTuneStrategy {
        epochs: 2,
        learning_rate: 0.1,
        batch_size: 8,
        ..FineTuneStrategy::default()
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub base_path: PathBuf,
    pub population_path: PathBuf,
}

impl Fixture {
    pub fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }
}

/// A random base model and a 40-record two-blob population, both on disk.
pub fn fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(seed);
    let base = ModelParams::xavier_init(arch(), &mut rng).unwrap();
    let base_path = dir.path().join("base_model.json");
    base.save(&base_path).unwrap();
    let population = dataset::generate(&SyntheticSpec {
        num_classes: 2,
        dim: 2,
        class_means: vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
        cov_scale: 1.0,
        outlier_fraction: 0.0,
        num_records: 40,
        seed,
    })
    .unwrap();
    let population_path = dir.path().join("population.csv");
    dataset::write_csv(&population, &population_path).unwrap();
    Fixture { dir, base_path, population_path }
}

/// Records named `{prefix}{start}..`; features stay well inside the
/// population's scale so training is numerically tame.
pub fn records(prefix: &str, count: usize, start: usize) -> Vec<Record> {
    (start..start + count)
        .map(|i| Record {
            id: format!("{prefix}{i}"),
            features: vec![(i % 7) as f64 * 0.5 - 1.5, (i % 5) as f64 * 0.5 - 1.0],
            label: i % 2,
        })
        .collect()
}
