mod common;

use std::path::PathBuf;
use std::time::Instant;

use lorm_core::experiment::{run_ablation_suite, run_centralized, run_experiment, ExperimentConfig};
use lorm_core::federation::{PeftKind, Strategy};
use lorm_core::linalg::{GramStat, Matrix};
use lorm_core::merge::{objective_omega, MergeInput};
use lorm_core::snapshot::{merge_offline, MergeKind, Snapshot, SnapshotLayer};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        classes: 6,
        tasks: 3,
        per_class_train: 40,
        per_class_test: 10,
        ..ExperimentConfig::default()
    }
}

#[test]
fn degenerate_federation_matches_centralized_training() {
    let cfg = ExperimentConfig {
        strategy: Strategy::FedavgFull,
        clients: 1,
        tasks: 1,
        seed: 3,
        ..tiny()
    };
    let report = run_experiment(&cfg).unwrap();
    let central = run_centralized(&cfg).unwrap();
    assert_eq!(report.per_task_accuracy.len(), 1);
    assert!((report.per_task_accuracy[0] - central[0]).abs() <= 1e-12);
}

#[test]
fn default_run_is_fast_and_self_consistent() {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(report.per_task_accuracy.len(), cfg.tasks);
    assert_eq!(report.recomputed_faa().unwrap(), report.faa);
    assert_eq!(report.config, cfg);
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.events.len(), cfg.tasks * cfg.rounds_per_task);
    assert!(report.faa > 1.0 / cfg.classes as f64, "below chance: {}", report.faa);
}

#[test]
fn every_adapter_kind_runs() {
    for peft in [PeftKind::Lora, PeftKind::Vera, PeftKind::Ia3] {
        for strategy in Strategy::ALL {
            let cfg = ExperimentConfig {
                strategy,
                peft_kind: peft,
                ..tiny()
            };
            let report = run_experiment(&cfg).unwrap_or_else(|e| panic!("{strategy}/{peft:?}: {e}"));
            assert!((0.0..=1.0).contains(&report.faa));
        }
    }
}

#[test]
fn invalid_config_fails_before_running() {
    for (key, value) in [("beta", "0"), ("gamma_backbone", "1.5"), ("clients", "0"), ("rank", "0")] {
        let mut cfg = tiny();
        cfg.set(key, value).unwrap();
        assert!(run_experiment(&cfg).is_err(), "{key}={value} accepted");
    }
}

#[test]
fn suite_has_one_row_per_strategy() {
    let cfg = ExperimentConfig {
        tasks: 2,
        classes: 4,
        ..tiny()
    };
    assert!(run_ablation_suite(&cfg, &[0, 1]).is_err());
    let suite = run_ablation_suite(&cfg, &[0, 1, 2]).unwrap();
    assert_eq!(suite.rows.len(), Strategy::ALL.len());
    for row in &suite.rows {
        assert_eq!(row.per_seed.len(), 3);
        let mean = row.per_seed.iter().map(|s| s.faa).sum::<f64>() / 3.0;
        assert!((mean - row.mean_faa).abs() < 1e-12);
    }
}

fn random_snapshot(seed: u64, tag: u64) -> Snapshot {
    let mut rng = common::rng(seed, tag);
    let layers = [(4, 6), (3, 5)]
        .iter()
        .enumerate()
        .map(|(i, &(d, k))| {
            let x = common::random_inputs(&mut rng, k, 1, 1e4).remove(0);
            SnapshotLayer {
                name: format!("layer{i}"),
                weight: Matrix::gaussian(d, k, 1.0, &mut rng),
                gram: Some(GramStat::from_inputs(&x)),
                shared_a: None,
            }
        })
        .collect();
    Snapshot { layers }
}

#[test]
fn offline_merge_never_loses_to_an_input() {
    for seed in 0..10 {
        let inputs: Vec<(PathBuf, Snapshot)> = (0..2)
            .map(|i| (PathBuf::from(format!("s{i}.json")), random_snapshot(seed, i)))
            .collect();
        let (merged, report) = merge_offline(&inputs, MergeKind::Regmean, None, 0.0).unwrap();
        for (l, layer) in merged.layers.iter().enumerate() {
            let weights: Vec<Matrix> = inputs.iter().map(|(_, s)| s.layers[l].weight.clone()).collect();
            let grams: Vec<GramStat> = inputs.iter().map(|(_, s)| s.layers[l].gram.clone().unwrap()).collect();
            let input = MergeInput::from_parts(&weights, &grams).unwrap();
            let merged_omega = objective_omega(&layer.weight, &input).unwrap();
            let best = weights
                .iter()
                .map(|w| objective_omega(w, &input).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(merged_omega <= best * (1.0 + 1e-12), "seed {seed} layer {l}");
            assert!((report.layers[l].after - merged_omega).abs() <= 1e-9 * merged_omega.max(1.0));
        }
    }
}

#[test]
fn offline_merge_fixed_points() {
    let one = random_snapshot(1, 0);
    let (merged, _) = merge_offline(&[(PathBuf::from("a"), one.clone())], MergeKind::Regmean, None, 0.0).unwrap();
    for (m, o) in merged.layers.iter().zip(&one.layers) {
        assert!(m.weight.rel_diff(&o.weight) <= 1e-10);
    }
    let pair = [(PathBuf::from("a"), one.clone()), (PathBuf::from("b"), one.clone())];
    let (merged, _) = merge_offline(&pair, MergeKind::TaskResiduals, None, 0.0).unwrap();
    for (m, o) in merged.layers.iter().zip(&one.layers) {
        assert!(m.weight.rel_diff(&o.weight) <= 1e-10);
    }
}

#[test]
fn snapshot_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    let snap = random_snapshot(2, 0);
    snap.save(&path).unwrap();
    assert_eq!(Snapshot::load(&path).unwrap(), snap);
    assert!(Snapshot::load(&dir.path().join("missing.json")).is_err());
}
