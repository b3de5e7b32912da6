//! End-to-end: synthetic data -> base model -> shadow ensemble -> batch
//! scores -> per-record baseline -> comparison, at a deliberately small
//! scale so it stays fast.

use privscore_core::dataset::{self, SyntheticSpec};
use privscore_core::lira::{LiraConfig, prepare_shadow_ensemble};
use privscore_core::model::{Activation, ArchSpec, FineTuneStrategy, train};
use privscore_core::scoring::{
    BatchConfig, compare_scores, per_sample_baseline, score_batch,
};

#[test]
fn whole_pipeline_runs_and_is_deterministic() {
    let spec = SyntheticSpec {
        num_classes: 2,
        dim: 2,
        class_means: vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
        cov_scale: 1.0,
        outlier_fraction: 0.1,
        num_records: 80,
        seed: 90,
    };
    let all = dataset::generate(&spec).unwrap();
    let (batch, population) = all.split_prefix(8).unwrap();

    let arch = ArchSpec {
        input_dim: 2,
        hidden_layers: vec![],
        num_classes: 2,
        activation: Activation::Relu,
    };
    let strategy = FineTuneStrategy { epochs: 4, learning_rate: 0.1, ..Default::default() };
    let base = train(&arch, &population, &strategy, 91).unwrap();
    let ensemble = prepare_shadow_ensemble(&arch, &population, 8, 0.5, &strategy, 92).unwrap();

    let config = BatchConfig::default();
    let report = score_batch(&batch, &base, &strategy, &ensemble, &config, 16, 93).unwrap();
    assert_eq!(report.entries.len(), 8);
    assert_eq!(report.timings.fine_tune_count, 16);

    let lira_config = LiraConfig::default();
    let baseline_scores: Vec<f64> = batch
        .records()
        .iter()
        .map(|r| {
            per_sample_baseline(r, &population, &arch, &strategy, &lira_config, 8, 94).unwrap()
        })
        .collect();
    for s in &baseline_scores {
        assert!((0.0..=1.0).contains(s));
    }

    let batch_scores: Vec<f64> = report.entries.iter().map(|e| e.score).collect();
    let comparison = compare_scores(&batch_scores, &baseline_scores).unwrap();
    assert!(comparison.mean_abs_diff.is_finite());

    // The whole pipeline is a pure function of its seeds.
    let report2 = score_batch(&batch, &base, &strategy, &ensemble, &config, 16, 93).unwrap();
    assert_eq!(report.canonical_json(), report2.canonical_json());
    let baseline2 = per_sample_baseline(
        &batch.records()[0],
        &population,
        &arch,
        &strategy,
        &lira_config,
        8,
        94,
    )
    .unwrap();
    assert_eq!(baseline_scores[0], baseline2);
}
