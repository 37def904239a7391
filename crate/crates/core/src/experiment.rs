//! End-to-end runs: config, world construction, federated training,
//! evaluation and reports.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_synthetic_dataset, SyntheticDataset};
use crate::error::{LormError, Result};
use crate::fcil::{
    balanced_class_split, dirichlet_partition, evaluate_final, faa, ClientPartition, HeadBank, PartitionManifest,
    TaskHead, TaskSpec, split_tasks,
};
use crate::federation::{
    comm_cost, CommLedger, CommReport, DeployedModel, FederationConfig, HeadMerge, PeftKind, RoundEvent, ServerState, Strategy,
};
use crate::linalg::{GramStat, Matrix};
use crate::merge::{weighted_mean, ScaleProjection};
use crate::peft::{LinearLayer, Residual};
use crate::snapshot::{Snapshot, SnapshotLayer};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::train::{local_train, pretrain_backbone, MlpModel, PretextConfig, SgdConfig, Trainable};

/// Every knob of a run. Serialized as TOML with all defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub blob_std: f64,
    pub tasks: usize,
    pub clients: usize,
    pub beta: f64,
    pub rank: usize,
    pub rounds_per_task: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma_backbone: f64,
    pub gamma_classifier: f64,
    pub ridge: f64,
    pub strategy: Strategy,
    pub peft_kind: PeftKind,
    pub seed: u64,
    /// Even-numbered tasks keep only `1 / task_sample_ratio` of their
    /// training examples (1 keeps everything).
    pub task_sample_ratio: usize,
    pub head_init_std: f64,
    pub head_merge: HeadMerge,
    /// Reduction of the solved matrix to VeRA / (IA)^3 scaling vectors.
    pub scale_projection: ScaleProjection,
    pub pretrain_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classes: 20,
            dim: 32,
            hidden: 64,
            per_class_train: 200,
            per_class_test: 100,
            blob_std: 0.25,
            tasks: 5,
            clients: 5,
            beta: 0.5,
            rank: 4,
            rounds_per_task: 3,
            epochs_per_round: 2,
            batch_size: 8,
            learning_rate: 0.4,
            gamma_backbone: 0.5,
            gamma_classifier: 0.5,
            ridge: crate::linalg::DEFAULT_RIDGE,
            strategy: Strategy::Lorm,
            peft_kind: PeftKind::Lora,
            seed: 0,
            task_sample_ratio: 1,
            head_init_std: 0.01,
            head_merge: HeadMerge::Regmean,
            scale_projection: ScaleProjection::LeastSquares,
            pretrain_steps: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LormError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Sets one key from its textual value, as given on the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| LormError::Config(e.to_string()))?;
        let old = table
            .get(key)
            .ok_or_else(|| LormError::Config(format!("unknown config key '{key}'")))?;
        let new = match old {
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => value
                .parse::<toml::Value>()
                .or_else(|_| toml::from_str::<toml::Table>(&format!("v = {value}")).map(|t| t["v"].clone()))
                .map_err(|e| LormError::Config(format!("bad value '{value}' for {key}: {e}")))?,
        };
        table.insert(key.to_string(), new);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| LormError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LormError::Config(msg));
        let counts = [
            ("classes", self.classes),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("per_class_train", self.per_class_train),
            ("per_class_test", self.per_class_test),
            ("tasks", self.tasks),
            ("clients", self.clients),
            ("rank", self.rank),
            ("rounds_per_task", self.rounds_per_task),
            ("epochs_per_round", self.epochs_per_round),
            ("batch_size", self.batch_size),
            ("task_sample_ratio", self.task_sample_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.classes < 2 {
            return bad("classes must be at least 2".into());
        }
        if self.tasks > self.classes {
            return bad(format!("{} tasks cannot share {} classes", self.tasks, self.classes));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        for (name, g) in [("gamma_backbone", self.gamma_backbone), ("gamma_classifier", self.gamma_classifier)] {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("{name} must lie in [0, 1], got {g}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be non-negative, got {}", self.ridge));
        }
        if !(self.blob_std >= 0.0 && self.blob_std.is_finite()) {
            return bad(format!("blob_std must be non-negative, got {}", self.blob_std));
        }
        if !(self.head_init_std >= 0.0 && self.head_init_std.is_finite()) {
            return bad(format!("head_init_std must be non-negative, got {}", self.head_init_std));
        }
        let min_dim = self.dim.min(self.hidden);
        if self.strategy.uses_adapter() && self.peft_kind != PeftKind::Ia3 && self.rank > min_dim {
            return bad(format!("rank {} exceeds the smallest layer dimension {min_dim}", self.rank));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        vec![self.dim, self.hidden, self.hidden]
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            strategy: self.strategy,
            peft: self.peft_kind,
            rank: self.rank,
            rounds_per_task: self.rounds_per_task,
            epochs_per_round: self.epochs_per_round,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            gamma_backbone: self.gamma_backbone,
            gamma_classifier: self.gamma_classifier,
            ridge: self.ridge,
            head_init_std: self.head_init_std,
            head_merge: self.head_merge,
            scale_projection: self.scale_projection,
            seed: self.seed,
        }
    }

    /// SHA-256 over the crate version and the canonical config JSON.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_NAME").as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

/// Dataset, task split, client partitions and frozen backbone of a run.
#[derive(Debug, Clone)]
pub struct World {
    pub data: SyntheticDataset,
    pub tasks: Vec<TaskSpec>,
    pub partitions: Vec<Vec<ClientPartition>>,
    pub backbone: Vec<LinearLayer>,
}

/// Keeps the first `1 / ratio` (rounded up) of each class's training
/// examples on even-numbered tasks.
fn subsample_even_tasks(tasks: &mut [TaskSpec], labels: &[usize], ratio: usize) {
    if ratio <= 1 {
        return;
    }
    for task in tasks.iter_mut().filter(|t| t.task_id % 2 == 0) {
        let mut kept = Vec::new();
        for &c in &task.class_ids {
            let members: Vec<usize> = task.train_indices.iter().copied().filter(|&i| labels[i] == c).collect();
            kept.extend_from_slice(&members[..members.len().div_ceil(ratio)]);
        }
        kept.sort_unstable();
        task.train_indices = kept;
    }
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let data = make_synthetic_dataset(
        cfg.classes,
        cfg.dim,
        cfg.per_class_train,
        cfg.per_class_test,
        cfg.blob_std,
        cfg.seed,
    )?;
    let per_task = balanced_class_split(cfg.classes, cfg.tasks)?;
    let mut tasks = split_tasks(&data.labels, &data.train_indices, &data.test_indices, &per_task)?;
    subsample_even_tasks(&mut tasks, &data.labels, cfg.task_sample_ratio);
    let partitions = tasks
        .iter()
        .map(|t| dirichlet_partition(t, &data.labels, cfg.clients, cfg.beta, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let pretext = PretextConfig {
        steps: cfg.pretrain_steps,
        ..PretextConfig::default()
    };
    let backbone = pretrain_backbone(&cfg.layer_dims(), &pretext, cfg.seed)?;
    Ok(World {
        data,
        tasks,
        partitions,
        backbone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub per_task_accuracy: Vec<f64>,
    pub faa: f64,
    /// Mean client loss of every round, in order.
    pub round_losses: Vec<f64>,
    pub events: Vec<RoundEvent>,
    pub ledger: CommLedger,
    pub comm: CommReport,
    pub partitions: PartitionManifest,
    /// Excluded from [`RunReport::digest`]; the only non-reproducible field.
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// SHA-256 of the report with the wall clock zeroed.
    pub fn digest(&self) -> String {
        let mut copy = self.clone();
        copy.wall_clock_seconds = 0.0;
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("report serializes")))
    }

    /// FAA recomputed from the stored per-task accuracies.
    pub fn recomputed_faa(&self) -> Result<f64> {
        faa(&self.per_task_accuracy)
    }
}

/// Federated training over every task, followed by the cross-task merge
/// and class-incremental evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_detailed(cfg).map(|(report, _, _)| report)
}

/// [`run_experiment`] that also returns the deployed model and the final
/// server state.
pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<(RunReport, DeployedModel, ServerState)> {
    let start = Instant::now();
    let world = build_world(cfg)?;
    let (model, server) = train_federated(cfg, &world)?;
    let accuracy = evaluate_final(&model, &world.data.features, &world.data.labels, &world.tasks)?;
    let round_losses = server
        .events
        .iter()
        .map(|e| e.client_losses.iter().sum::<f64>() / e.client_losses.len() as f64)
        .collect();
    let comm = comm_cost(&server.ledger, cfg.strategy, &server.layer_shapes());
    let report = RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        faa: faa(&accuracy)?,
        per_task_accuracy: accuracy,
        round_losses,
        events: server.events.clone(),
        ledger: server.ledger.clone(),
        comm,
        partitions: PartitionManifest::from_partitions(&world.partitions),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, model, server))
}

/// Snapshot of the merged residual of every layer with the summed task
/// Grams (when the strategy collected any).
pub fn deployed_snapshot(model: &DeployedModel, server: &ServerState) -> Result<Snapshot> {
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let gram = if server.task_grams.is_empty() {
                None
            } else {
                Some(GramStat::sum(server.task_grams.iter().map(|g| &g[l]))?)
            };
            Ok(SnapshotLayer {
                name: format!("layer{l}"),
                weight: layer.residual_matrix(),
                gram,
                shared_a: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot { layers })
}

/// Runs every task through the server and returns the finalized model with
/// the server state (for its ledger and event log).
pub fn train_federated(cfg: &ExperimentConfig, world: &World) -> Result<(DeployedModel, ServerState)> {
    let mut server = ServerState::new(cfg.federation(), world.backbone.clone())?;
    for (task, clients) in world.tasks.iter().zip(&world.partitions) {
        server.begin_task(task)?;
        for _ in 0..cfg.rounds_per_task {
            server.run_round(clients, &world.data)?;
        }
        server.finish_task()?;
    }
    Ok((server.finalize()?, server))
}

/// Single-site reference: every task trained on its whole training set with
/// the dense residual, the same seeds client 0 would use, and the mean of
/// task residuals at the end.
pub fn run_centralized(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let world = build_world(cfg)?;
    let feat = cfg.hidden;
    let mut layers: Vec<LinearLayer> = world.backbone.clone();
    let mut bank = HeadBank::default();
    let mut residuals: Vec<Vec<Matrix>> = Vec::new();
    for task in &world.tasks {
        for l in &mut layers {
            l.residual = Residual::Dense(Matrix::zeros(l.out_dim(), l.in_dim()));
        }
        let mut rng = rng_for(cfg.seed, Stream::Head, &[task.task_id as u64]);
        let head = TaskHead {
            task_id: task.task_id,
            class_ids: task.class_ids.clone(),
            weight: Matrix::gaussian(task.class_ids.len(), feat, cfg.head_init_std, &mut rng),
            bias: vec![0.0; task.class_ids.len()],
        };
        let mut heads = bank.heads.clone();
        heads.push(head);
        let mut model = MlpModel::new(layers.clone(), heads)?;
        let everything = ClientPartition {
            task_id: task.task_id,
            client_id: 0,
            indices: task.train_indices.clone(),
        };
        for round in 1..=cfg.rounds_per_task {
            let sgd = SgdConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs_per_round,
                batch_size: cfg.batch_size,
                seed: derive_seed(cfg.seed, Stream::Sgd, &[task.task_id as u64, round as u64, 0]),
            };
            model = local_train(&model, &world.data, &everything, Trainable::Full, &sgd)?.model;
        }
        residuals.push(model.layers.iter().map(LinearLayer::residual_matrix).collect());
        bank.push(model.heads.pop().expect("model has a head"))?;
        layers = model.layers;
    }
    let t = residuals.len();
    let final_layers = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let deltas: Vec<Matrix> = residuals.iter().map(|r| r[l].clone()).collect();
            LinearLayer::new(layer.w0.clone(), layer.bias.clone(), Residual::Dense(weighted_mean(&deltas, &vec![1.0; t])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (weight, bias, class_ids) = bank.assemble()?;
    let model = DeployedModel {
        layers: final_layers,
        weight,
        bias,
        class_ids,
    };
    evaluate_final(&model, &world.data.features, &world.data.labels, &world.tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub faa: f64,
    pub per_task_accuracy: Vec<f64>,
    pub round_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub strategy: Strategy,
    pub mean_faa: f64,
    /// Sample standard deviation over seeds.
    pub std_faa: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn row(&self, strategy: Strategy) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs `strategies` on every seed of `seeds`, all other keys from `base`.
pub fn run_strategies(base: &ExperimentConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<SuiteReport> {
    base.validate()?;
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let cfg = ExperimentConfig {
                strategy,
                seed,
                ..base.clone()
            };
            run_experiment(&cfg).map(|r| SeedResult {
                seed,
                faa: r.faa,
                per_task_accuracy: r.per_task_accuracy,
                round_losses: r.round_losses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(i, &strategy)| {
            let per_seed = results[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let faas: Vec<f64> = per_seed.iter().map(|r| r.faa).collect();
            let (mean_faa, std_faa) = mean_std(&faas);
            SuiteRow {
                strategy,
                mean_faa,
                std_faa,
                per_seed,
            }
        })
        .collect();
    Ok(SuiteReport {
        base: base.clone(),
        seeds: seeds.to_vec(),
        rows,
    })
}

/// The full ablation ladder over at least three seeds.
pub fn run_ablation_suite(base: &ExperimentConfig, seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.len() < 3 {
        return Err(LormError::Config(format!(
            "an ablation suite needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    run_strategies(base, &Strategy::ALL, seeds)
}
