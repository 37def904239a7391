//! Server/client round engine.
//!
//! Per task the server installs a fresh residual module (zero `B`, seeded
//! shared `A`) and a fresh head, then runs synchronous rounds: every client
//! trains the factor the schedule selects, sends it with its layer-input Gram
//! statistics, and the server merges and broadcasts. At the end of a task the
//! dense residual `ΔW^t = B_M A_M` and the summed client Grams are stored; after
//! the last task they are merged across tasks and the heads are concatenated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{LormError, Result};
use crate::fcil::{Classifier, ClientPartition, HeadBank, TaskHead, TaskSpec};
use crate::linalg::{GramStat, Matrix};
use crate::merge::{
    merge_a_fixed_b, merge_b_fixed_a, merge_ia3_with, merge_task_residuals, merge_vera_lambda_b_with,
    merge_vera_lambda_d_with, regmean_merge, weighted_mean, weighted_mean_vec, MergeInput, ScaleProjection,
};
use crate::peft::{init_ia3, init_lora, init_vera, LinearLayer, Residual};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::train::{backbone_forward, collect_gram, local_train, LayerGrams, MlpModel, SgdConfig, Trainable};

/// Aggregation strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Alternating B/A rounds, closed-form merges, RegMean across tasks.
    Lorm,
    /// Closed-form merges but only `B` is ever trained.
    LormOnlyB,
    /// Both LoRA factors trained, arithmetic mean per factor.
    FedavgLora,
    /// Dense residual trained, arithmetic mean.
    FedavgFull,
    /// Dense residual trained, RegMean across clients and tasks.
    RegmeanFull,
    /// LoRM with a plain mean of task residuals instead of the cross-task RegMean.
    LormTaskMean,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedavgFull,
        Strategy::FedavgLora,
        Strategy::RegmeanFull,
        Strategy::LormTaskMean,
        Strategy::Lorm,
        Strategy::LormOnlyB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Lorm => "lorm",
            Strategy::LormOnlyB => "lorm-only-b",
            Strategy::FedavgLora => "fedavg-lora",
            Strategy::FedavgFull => "fedavg-full",
            Strategy::RegmeanFull => "regmean-full",
            Strategy::LormTaskMean => "lorm-task-mean",
        }
    }

    /// Whether clients send Gram statistics.
    pub fn uses_grams(self) -> bool {
        !matches!(self, Strategy::FedavgLora | Strategy::FedavgFull)
    }

    /// Whether the model adapts with a PEFT module rather than a dense delta.
    pub fn uses_adapter(self) -> bool {
        !matches!(self, Strategy::FedavgFull | Strategy::RegmeanFull)
    }

    /// Whether task residuals are merged with the Gram-weighted closed form.
    pub fn regmean_across_tasks(self) -> bool {
        matches!(self, Strategy::Lorm | Strategy::LormOnlyB | Strategy::RegmeanFull)
    }
}

impl std::str::FromStr for Strategy {
    type Err = LormError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| LormError::Config(format!("unknown strategy '{s}'")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeftKind {
    Lora,
    Vera,
    Ia3,
}

impl std::str::FromStr for PeftKind {
    type Err = LormError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(PeftKind::Lora),
            "vera" => Ok(PeftKind::Vera),
            "ia3" => Ok(PeftKind::Ia3),
            other => Err(LormError::Config(format!("unknown peft kind '{other}'"))),
        }
    }
}

/// Part of the residual trained in a round. For VeRA, `B` is `lambda_b` and
/// `A` is `lambda_d`; (IA)^3 always trains its single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    B,
    A,
    Both,
    Scale,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    /// 1-based round index within the task.
    pub round: usize,
    pub factor: Factor,
}

impl RoundSchedule {
    /// `B` on odd rounds and `A` on even rounds for the alternating strategies.
    pub fn for_round(round: usize, strategy: Strategy, peft: PeftKind) -> Result<Self> {
        if round == 0 {
            return Err(LormError::Protocol("rounds are numbered from 1".into()));
        }
        let factor = if !strategy.uses_adapter() {
            Factor::Dense
        } else if peft == PeftKind::Ia3 {
            Factor::Scale
        } else {
            match strategy {
                Strategy::Lorm | Strategy::LormTaskMean => {
                    if round % 2 == 1 {
                        Factor::B
                    } else {
                        Factor::A
                    }
                }
                Strategy::LormOnlyB => Factor::B,
                _ => Factor::Both,
            }
        };
        Ok(RoundSchedule { round, factor })
    }

    pub fn trainable(&self, peft: PeftKind) -> Trainable {
        match (self.factor, peft) {
            (Factor::Dense, _) => Trainable::Full,
            (_, PeftKind::Ia3) | (Factor::Scale, _) => Trainable::Ia3,
            (Factor::B, PeftKind::Lora) => Trainable::LoraB,
            (Factor::A, PeftKind::Lora) => Trainable::LoraA,
            (Factor::Both, PeftKind::Lora) => Trainable::LoraBoth,
            (Factor::B, PeftKind::Vera) => Trainable::VeraLambdaB,
            (Factor::A, PeftKind::Vera) => Trainable::VeraLambdaD,
            (Factor::Both, PeftKind::Vera) => Trainable::VeraBoth,
        }
    }
}

/// Trained parameters of one layer as sent by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "part", rename_all = "snake_case")]
pub enum LayerPayload {
    B(Matrix),
    A(Matrix),
    BothFactors { b: Matrix, a: Matrix },
    LambdaB(Vec<f64>),
    LambdaD(Vec<f64>),
    BothLambdas { lambda_b: Vec<f64>, lambda_d: Vec<f64> },
    Ell(Vec<f64>),
    Dense(Matrix),
}

impl LayerPayload {
    /// The part of a trained residual that `trainable` changed.
    pub fn extract(residual: &Residual, trainable: Trainable) -> Result<Self> {
        Ok(match (residual, trainable) {
            (Residual::Lora(m), Trainable::LoraB) => LayerPayload::B(m.b.clone()),
            (Residual::Lora(m), Trainable::LoraA) => LayerPayload::A(m.a.clone()),
            (Residual::Lora(m), Trainable::LoraBoth) => LayerPayload::BothFactors {
                b: m.b.clone(),
                a: m.a.clone(),
            },
            (Residual::Vera(m), Trainable::VeraLambdaB) => LayerPayload::LambdaB(m.lambda_b.clone()),
            (Residual::Vera(m), Trainable::VeraLambdaD) => LayerPayload::LambdaD(m.lambda_d.clone()),
            (Residual::Vera(m), Trainable::VeraBoth) => LayerPayload::BothLambdas {
                lambda_b: m.lambda_b.clone(),
                lambda_d: m.lambda_d.clone(),
            },
            (Residual::Ia3(m), Trainable::Ia3) => LayerPayload::Ell(m.ell.clone()),
            (Residual::Dense(d), Trainable::Full) => LayerPayload::Dense(d.clone()),
            (r, t) => {
                return Err(LormError::Protocol(format!(
                    "no payload for {t:?} on a {} residual",
                    r.kind()
                )))
            }
        })
    }

    /// Number of scalars on the wire.
    pub fn values(&self) -> usize {
        match self {
            LayerPayload::B(m) | LayerPayload::A(m) | LayerPayload::Dense(m) => m.rows() * m.cols(),
            LayerPayload::BothFactors { b, a } => b.rows() * b.cols() + a.rows() * a.cols(),
            LayerPayload::LambdaB(v) | LayerPayload::LambdaD(v) | LayerPayload::Ell(v) => v.len(),
            LayerPayload::BothLambdas { lambda_b, lambda_d } => lambda_b.len() + lambda_d.len(),
        }
    }
}

/// Gram statistic as transmitted: only the diagonal when off-diagonal
/// entries were decayed to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum WireGram {
    Diagonal { samples: usize, values: Vec<f64> },
    Full { samples: usize, gram: Matrix },
}

impl From<&GramStat> for WireGram {
    fn from(g: &GramStat) -> Self {
        if g.diagonal_only {
            WireGram::Diagonal {
                samples: g.samples,
                values: g.gram.diag(),
            }
        } else {
            WireGram::Full {
                samples: g.samples,
                gram: g.gram.clone(),
            }
        }
    }
}

impl WireGram {
    pub fn to_stat(&self) -> GramStat {
        match self {
            WireGram::Diagonal { samples, values } => {
                let k = values.len();
                GramStat {
                    gram: Matrix::from_fn(k, k, |i, j| if i == j { values[i] } else { 0.0 }),
                    samples: *samples,
                    diagonal_only: true,
                }
            }
            WireGram::Full { samples, gram } => GramStat {
                gram: gram.clone(),
                samples: *samples,
                diagonal_only: false,
            },
        }
    }

    pub fn values(&self) -> usize {
        match self {
            WireGram::Diagonal { values, .. } => values.len(),
            WireGram::Full { gram, .. } => gram.rows() * gram.cols(),
        }
    }
}

/// Everything a client sends at the end of a round. Raw activations have no
/// field to travel in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub task_id: usize,
    pub round: usize,
    /// One trained payload per backbone layer.
    pub payload: Vec<LayerPayload>,
    /// Per-layer input Grams (backbone), absent for FedAvg strategies.
    pub grams: Option<Vec<WireGram>>,
    /// Gram of the classifier input.
    pub classifier_gram: Option<WireGram>,
    pub sample_count: usize,
    pub head: TaskHead,
    pub loss: f64,
}

impl ClientUpdate {
    pub fn traffic(&self) -> ClientTraffic {
        let head_values = self.head.weight.rows() * self.head.weight.cols() + self.head.bias.len();
        ClientTraffic {
            client_id: self.client_id,
            factor_values: self.payload.iter().map(LayerPayload::values).collect(),
            gram_values: self
                .grams
                .as_ref()
                .map(|g| g.iter().map(WireGram::values).collect())
                .unwrap_or_else(|| vec![0; self.payload.len()]),
            classifier_gram_values: self.classifier_gram.as_ref().map_or(0, WireGram::values),
            head_values,
        }
    }
}

/// Flags any matrix in a serialized update whose shape is
/// `(layer input dim) x (sample count)`, i.e. something that could be raw
/// layer inputs.
pub fn privacy_lint(update: &ClientUpdate, input_dims: &[usize]) -> Result<()> {
    fn walk(v: &serde_json::Value, path: &str, dims: &[usize], n: usize, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                if let (Some(r), Some(c)) = (
                    map.get("rows").and_then(serde_json::Value::as_u64),
                    map.get("cols").and_then(serde_json::Value::as_u64),
                ) {
                    if c as usize == n && dims.contains(&(r as usize)) {
                        out.push(format!("{path} has shape {r}x{c}"));
                    }
                }
                for (k, child) in map {
                    walk(child, &format!("{path}.{k}"), dims, n, out);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    walk(child, &format!("{path}[{i}]"), dims, n, out);
                }
            }
            _ => {}
        }
    }
    let value = serde_json::to_value(update)?;
    let mut found = Vec::new();
    walk(&value, "update", input_dims, update.sample_count, &mut found);
    if found.is_empty() {
        Ok(())
    } else {
        Err(LormError::Protocol(format!(
            "client {} update may carry raw activations: {}",
            update.client_id,
            found.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTraffic {
    pub client_id: usize,
    /// Trained-factor values per backbone layer.
    pub factor_values: Vec<usize>,
    /// Gram values per backbone layer.
    pub gram_values: Vec<usize>,
    pub classifier_gram_values: usize,
    pub head_values: usize,
}

impl ClientTraffic {
    pub fn total(&self) -> usize {
        self.factor_values.iter().sum::<usize>()
            + self.gram_values.iter().sum::<usize>()
            + self.classifier_gram_values
            + self.head_values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub task_id: usize,
    pub round: usize,
    pub factor: Factor,
    pub upstream: Vec<ClientTraffic>,
    /// Values broadcast to each client after the merge.
    pub downstream_per_client: usize,
}

impl RoundLedger {
    pub fn upstream_total(&self) -> usize {
        self.upstream.iter().map(ClientTraffic::total).sum()
    }

    pub fn downstream_total(&self) -> usize {
        self.downstream_per_client * self.upstream.len()
    }
}

/// Count of every scalar sent in each round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: Vec<RoundLedger>,
}

impl CommLedger {
    pub fn upstream_total(&self) -> usize {
        self.rounds.iter().map(RoundLedger::upstream_total).sum()
    }

    pub fn downstream_total(&self) -> usize {
        self.rounds.iter().map(RoundLedger::downstream_total).sum()
    }
}

/// Trainable parameter count of a LoRA module, `r (d + k)`.
pub fn lora_trainable_parameters(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

/// Parameters of full fine-tuning, `d k`.
pub fn full_finetune_parameters(d: usize, k: usize) -> usize {
    d * k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub task_id: usize,
    pub round: usize,
    pub upstream: usize,
    pub downstream: usize,
    /// Backbone values (factors plus Grams) sent in both directions.
    pub backbone_values: usize,
    /// Dense `d k` per layer, per client, in both directions.
    pub full_finetune_values: usize,
    pub ratio_vs_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub strategy: Strategy,
    pub per_round: Vec<RoundCost>,
    pub upstream_total: usize,
    pub downstream_total: usize,
    pub backbone_total: usize,
    pub full_finetune_total: usize,
    pub ratio_vs_full: f64,
}

/// Per-round and cumulative traffic, compared against exchanging every
/// backbone weight (`d k` per layer) in both directions.
pub fn comm_cost(ledger: &CommLedger, strategy: Strategy, layer_shapes: &[(usize, usize)]) -> CommReport {
    let dense: usize = layer_shapes.iter().map(|&(d, k)| full_finetune_parameters(d, k)).sum();
    let per_round: Vec<RoundCost> = ledger
        .rounds
        .iter()
        .map(|r| {
            let clients = r.upstream.len();
            let up_backbone: usize = r
                .upstream
                .iter()
                .map(|c| c.factor_values.iter().sum::<usize>() + c.gram_values.iter().sum::<usize>())
                .sum();
            let down_backbone = clients * r.upstream.first().map_or(0, |c| c.factor_values.iter().sum());
            let backbone_values = up_backbone + down_backbone;
            let full = 2 * clients * dense;
            RoundCost {
                task_id: r.task_id,
                round: r.round,
                upstream: r.upstream_total(),
                downstream: r.downstream_total(),
                backbone_values,
                full_finetune_values: full,
                ratio_vs_full: backbone_values as f64 / full.max(1) as f64,
            }
        })
        .collect();
    let backbone_total = per_round.iter().map(|r| r.backbone_values).sum();
    let full_finetune_total = per_round.iter().map(|r| r.full_finetune_values).sum();
    CommReport {
        strategy,
        upstream_total: ledger.upstream_total(),
        downstream_total: ledger.downstream_total(),
        backbone_total,
        full_finetune_total,
        ratio_vs_full: backbone_total as f64 / full_finetune_total.max(1) as f64,
        per_round,
    }
}

/// One line of the round-by-round event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvent {
    pub task_id: usize,
    pub round: usize,
    pub factor: Factor,
    pub client_losses: Vec<f64>,
    /// Per layer, Frobenius distance between the merged payload and the
    /// unweighted client mean.
    pub merge_shift_norms: Vec<f64>,
    pub upstream_values: usize,
    pub downstream_values: usize,
}

/// How the current task's head is merged across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMerge {
    /// Sample-weighted mean for every strategy.
    Mean,
    /// Gram-weighted closed form over the classifier-input Grams for
    /// strategies that send Grams; sample-weighted mean otherwise. Biases
    /// always use the mean.
    Regmean,
}

impl std::str::FromStr for HeadMerge {
    type Err = LormError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadMerge::Mean),
            "regmean" => Ok(HeadMerge::Regmean),
            other => Err(LormError::Config(format!("unknown head merge '{other}'"))),
        }
    }
}

/// Knobs of the round engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub peft: PeftKind,
    pub rank: usize,
    pub rounds_per_task: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma_backbone: f64,
    pub gamma_classifier: f64,
    pub ridge: f64,
    pub head_init_std: f64,
    pub head_merge: HeadMerge,
    pub scale_projection: ScaleProjection,
    pub seed: u64,
}

/// The trained network after the final cross-task merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedModel {
    pub layers: Vec<LinearLayer>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub class_ids: Vec<usize>,
}

impl Classifier for DeployedModel {
    fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        let (acts, _) = backbone_forward(&self.layers, inputs)?;
        self.weight
            .matmul(acts.last().expect("non-empty"))?
            .add_to_rows(&self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ActiveTask {
    task_id: usize,
    class_ids: Vec<usize>,
    rounds_done: usize,
    last_grams: Option<Vec<LayerGrams>>,
}

/// Server-side state, mutated only between round barriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub config: FederationConfig,
    /// Frozen backbone with the current merged residual of each layer.
    pub layers: Vec<LinearLayer>,
    pub current_head: Option<TaskHead>,
    pub head_bank: HeadBank,
    /// Dense `ΔW^t` per completed task and layer.
    pub task_residuals: Vec<Vec<Matrix>>,
    /// Summed client Grams per completed task and layer.
    pub task_grams: Vec<Vec<GramStat>>,
    pub task_classifier_grams: Vec<GramStat>,
    pub ledger: CommLedger,
    pub events: Vec<RoundEvent>,
    active: Option<ActiveTask>,
}

impl ServerState {
    pub fn new(config: FederationConfig, backbone: Vec<LinearLayer>) -> Result<Self> {
        if backbone.is_empty() {
            return Err(LormError::invalid("backbone has no layers"));
        }
        if config.rounds_per_task == 0 {
            return Err(LormError::invalid("rounds_per_task must be at least 1"));
        }
        let layers = backbone
            .into_iter()
            .map(|mut l| {
                l.residual = Residual::None;
                l
            })
            .collect();
        Ok(ServerState {
            config,
            layers,
            current_head: None,
            head_bank: HeadBank::default(),
            task_residuals: Vec::new(),
            task_grams: Vec::new(),
            task_classifier_grams: Vec::new(),
            ledger: CommLedger::default(),
            events: Vec::new(),
            active: None,
        })
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.w0.shape()).collect()
    }

    pub fn completed_tasks(&self) -> usize {
        self.task_residuals.len()
    }

    fn fresh_residual(&self, layer: usize, task_id: usize) -> Result<Residual> {
        let (d, k) = self.layers[layer].w0.shape();
        let cfg = &self.config;
        if !cfg.strategy.uses_adapter() {
            return Ok(Residual::Dense(Matrix::zeros(d, k)));
        }
        Ok(match cfg.peft {
            PeftKind::Lora => {
                let seed = derive_seed(cfg.seed, Stream::Adapter, &[task_id as u64, layer as u64]);
                Residual::Lora(init_lora(d, k, cfg.rank, seed)?)
            }
            PeftKind::Vera => {
                // frozen VeRA factors are shared by every task
                let seed = derive_seed(cfg.seed, Stream::Adapter, &[0, layer as u64]);
                Residual::Vera(init_vera(d, k, cfg.rank, seed)?)
            }
            PeftKind::Ia3 => Residual::Ia3(init_ia3(d)),
        })
    }

    /// Installs fresh residuals (`B = 0`, new shared `A`) and a new head.
    pub fn begin_task(&mut self, task: &TaskSpec) -> Result<()> {
        if self.active.is_some() {
            return Err(LormError::Protocol("previous task has not been finished".into()));
        }
        if task.task_id != self.completed_tasks() + 1 {
            return Err(LormError::Protocol(format!(
                "task {} started after {} completed tasks",
                task.task_id,
                self.completed_tasks()
            )));
        }
        for l in 0..self.layers.len() {
            self.layers[l].residual = self.fresh_residual(l, task.task_id)?;
        }
        let feat = self.layers.last().expect("non-empty").out_dim();
        let mut rng = rng_for(self.config.seed, Stream::Head, &[task.task_id as u64]);
        self.current_head = Some(TaskHead {
            task_id: task.task_id,
            class_ids: task.class_ids.clone(),
            weight: Matrix::gaussian(task.class_ids.len(), feat, self.config.head_init_std, &mut rng),
            bias: vec![0.0; task.class_ids.len()],
        });
        self.active = Some(ActiveTask {
            task_id: task.task_id,
            class_ids: task.class_ids.clone(),
            rounds_done: 0,
            last_grams: None,
        });
        Ok(())
    }

    /// The model every client starts the next round from.
    pub fn broadcast_model(&self) -> Result<MlpModel> {
        let head = self
            .current_head
            .clone()
            .ok_or_else(|| LormError::Protocol("no active task".into()))?;
        let mut heads = self.head_bank.heads.clone();
        heads.push(head);
        MlpModel::new(self.layers.clone(), heads)
    }

    pub fn next_schedule(&self) -> Result<RoundSchedule> {
        let active = self
            .active
            .as_ref()
            .ok_or_else(|| LormError::Protocol("no active task".into()))?;
        RoundSchedule::for_round(active.rounds_done + 1, self.config.strategy, self.config.peft)
    }

    fn client_update(
        &self,
        model: &MlpModel,
        partition: &ClientPartition,
        data: &SyntheticDataset,
        schedule: RoundSchedule,
    ) -> Result<ClientUpdate> {
        let cfg = &self.config;
        let trainable = schedule.trainable(cfg.peft);
        let sgd = SgdConfig {
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs_per_round,
            batch_size: cfg.batch_size,
            seed: derive_seed(
                cfg.seed,
                Stream::Sgd,
                &[partition.task_id as u64, schedule.round as u64, partition.client_id as u64],
            ),
        };
        let outcome = local_train(model, data, partition, trainable, &sgd)?;
        let payload = outcome
            .model
            .layers
            .iter()
            .map(|l| LayerPayload::extract(&l.residual, trainable))
            .collect::<Result<Vec<_>>>()?;
        let (grams, classifier_gram) = if cfg.strategy.uses_grams() {
            let g = collect_gram(
                &outcome.model.layers,
                data,
                &partition.indices,
                cfg.gamma_backbone,
                cfg.gamma_classifier,
            )?;
            (
                Some(g.backbone.iter().map(WireGram::from).collect()),
                Some(WireGram::from(&g.classifier)),
            )
        } else {
            (None, None)
        };
        Ok(ClientUpdate {
            client_id: partition.client_id,
            task_id: partition.task_id,
            round: schedule.round,
            payload,
            grams,
            classifier_gram,
            sample_count: partition.indices.len(),
            head: outcome.model.heads.last().expect("model has a head").clone(),
            loss: outcome.mean_loss,
        })
    }

    /// Runs one synchronous round: local training on every client, merge,
    /// broadcast. A failing client aborts the round without touching state.
    pub fn run_round(&mut self, clients: &[ClientPartition], data: &SyntheticDataset) -> Result<RoundEvent> {
        let schedule = self.next_schedule()?;
        let active = self.active.as_ref().expect("checked by next_schedule");
        if clients.is_empty() {
            return Err(LormError::Protocol("round needs at least one client".into()));
        }
        if let Some(c) = clients.iter().find(|c| c.task_id != active.task_id) {
            return Err(LormError::Protocol(format!(
                "client {} holds data of task {}, active task is {}",
                c.client_id, c.task_id, active.task_id
            )));
        }
        let model = self.broadcast_model()?;
        let results: Vec<Result<ClientUpdate>> = clients
            .par_iter()
            .map(|p| self.client_update(&model, p, data, schedule))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for (p, r) in clients.iter().zip(results) {
            updates.push(r.map_err(|e| LormError::Client {
                client: p.client_id,
                source: Box::new(e),
            })?);
        }
        self.apply_updates(schedule, updates)
    }

    /// Server half of a round: merge client updates and broadcast the result.
    pub fn apply_updates(&mut self, schedule: RoundSchedule, updates: Vec<ClientUpdate>) -> Result<RoundEvent> {
        let expected = self.next_schedule()?;
        if expected != schedule {
            return Err(LormError::Protocol(format!(
                "schedule {schedule:?} does not match the expected {expected:?}"
            )));
        }
        let cfg = self.config;
        let weights: Vec<f64> = updates.iter().map(|u| u.sample_count as f64).collect();
        let client_grams: Option<Vec<LayerGrams>> = if cfg.strategy.uses_grams() {
            Some(
                updates
                    .iter()
                    .map(|u| {
                        let backbone = u
                            .grams
                            .as_ref()
                            .ok_or_else(|| LormError::Protocol(format!("client {} sent no grams", u.client_id)))?
                            .iter()
                            .map(WireGram::to_stat)
                            .collect();
                        let classifier = u
                            .classifier_gram
                            .as_ref()
                            .ok_or_else(|| LormError::Protocol(format!("client {} sent no classifier gram", u.client_id)))?
                            .to_stat();
                        Ok(LayerGrams { backbone, classifier })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let mut new_layers = self.layers.clone();
        let mut shifts = Vec::with_capacity(new_layers.len());
        for (l, layer) in new_layers.iter_mut().enumerate() {
            let payloads: Vec<&LayerPayload> = updates.iter().map(|u| &u.payload[l]).collect();
            let grams: Option<Vec<GramStat>> = client_grams
                .as_ref()
                .map(|g| g.iter().map(|lg| lg.backbone[l].clone()).collect());
            shifts.push(merge_layer(layer, &payloads, grams.as_deref(), &weights, &cfg)?);
        }

        let heads: Vec<Matrix> = updates.iter().map(|u| u.head.weight.clone()).collect();
        let biases: Vec<Vec<f64>> = updates.iter().map(|u| u.head.bias.clone()).collect();
        let mut head = self.current_head.clone().expect("active task has a head");
        head.weight = match (&client_grams, cfg.head_merge) {
            (Some(g), HeadMerge::Regmean) => {
                let cg: Vec<GramStat> = g.iter().map(|lg| lg.classifier.clone()).collect();
                regmean_merge(&MergeInput::from_parts(&heads, &cg)?, cfg.ridge)?
            }
            _ => weighted_mean(&heads, &weights)?,
        };
        head.bias = weighted_mean_vec(&biases, &weights)?;

        let upstream: Vec<ClientTraffic> = updates.iter().map(ClientUpdate::traffic).collect();
        let downstream_per_client = upstream.first().map_or(0, |t| t.factor_values.iter().sum::<usize>() + t.head_values);
        let entry = RoundLedger {
            task_id: head.task_id,
            round: schedule.round,
            factor: schedule.factor,
            upstream,
            downstream_per_client,
        };
        let event = RoundEvent {
            task_id: head.task_id,
            round: schedule.round,
            factor: schedule.factor,
            client_losses: updates.iter().map(|u| u.loss).collect(),
            merge_shift_norms: shifts,
            upstream_values: entry.upstream_total(),
            downstream_values: entry.downstream_total(),
        };

        self.layers = new_layers;
        self.current_head = Some(head);
        self.ledger.rounds.push(entry);
        self.events.push(event.clone());
        let active = self.active.as_mut().expect("checked by next_schedule");
        active.rounds_done += 1;
        active.last_grams = client_grams;
        Ok(event)
    }

    /// Stores `ΔW^t`, the task Grams (sum of the final-round client Grams)
    /// and the task head.
    pub fn finish_task(&mut self) -> Result<()> {
        let active = self
            .active
            .as_ref()
            .ok_or_else(|| LormError::Protocol("no active task to finish".into()))?;
        if active.rounds_done != self.config.rounds_per_task {
            return Err(LormError::Protocol(format!(
                "task {} finished after {} of {} rounds",
                active.task_id, active.rounds_done, self.config.rounds_per_task
            )));
        }
        let residuals: Vec<Matrix> = self.layers.iter().map(LinearLayer::residual_matrix).collect();
        if let Some(grams) = &active.last_grams {
            let summed = LayerGrams::sum(grams.iter())?;
            self.task_grams.push(summed.backbone);
            self.task_classifier_grams.push(summed.classifier);
        }
        let head = self.current_head.take().expect("active task has a head");
        debug_assert_eq!(head.class_ids, active.class_ids);
        self.head_bank.push(head)?;
        self.task_residuals.push(residuals);
        for layer in &mut self.layers {
            layer.residual = Residual::None;
        }
        self.active = None;
        Ok(())
    }

    /// Merges the stored task residuals per layer (closed form or plain
    /// mean, depending on the strategy) and concatenates the heads.
    pub fn finalize(&self) -> Result<DeployedModel> {
        if self.active.is_some() {
            return Err(LormError::Protocol("cannot finalize during a task".into()));
        }
        if self.task_residuals.is_empty() {
            return Err(LormError::Protocol("no finished tasks to finalize".into()));
        }
        let t = self.task_residuals.len();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let deltas: Vec<Matrix> = self.task_residuals.iter().map(|r| r[l].clone()).collect();
            let merged = if self.config.strategy.regmean_across_tasks() {
                let grams: Vec<GramStat> = self.task_grams.iter().map(|g| g[l].clone()).collect();
                merge_task_residuals(&deltas, &grams, self.config.ridge)?
            } else {
                weighted_mean(&deltas, &vec![1.0; t])?
            };
            layers.push(LinearLayer::new(layer.w0.clone(), layer.bias.clone(), Residual::Dense(merged))?);
        }
        let (weight, bias, class_ids) = self.head_bank.assemble()?;
        Ok(DeployedModel {
            layers,
            weight,
            bias,
            class_ids,
        })
    }
}

fn expect_matrix<'a>(p: &'a LayerPayload, want: &str) -> Result<&'a Matrix> {
    match (p, want) {
        (LayerPayload::B(m), "b") | (LayerPayload::A(m), "a") | (LayerPayload::Dense(m), "dense") => Ok(m),
        _ => Err(LormError::Protocol(format!("expected a {want} payload, got {p:?}"))),
    }
}

fn expect_vector<'a>(p: &'a LayerPayload, want: &str) -> Result<&'a Vec<f64>> {
    match (p, want) {
        (LayerPayload::LambdaB(v), "lambda_b") | (LayerPayload::LambdaD(v), "lambda_d") | (LayerPayload::Ell(v), "ell") => {
            Ok(v)
        }
        _ => Err(LormError::Protocol(format!("expected a {want} payload, got {p:?}"))),
    }
}

fn vec_shift(merged: &[f64], items: &[Vec<f64>]) -> Result<f64> {
    let mean = weighted_mean_vec(items, &vec![1.0; items.len()])?;
    Ok(merged.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

fn mat_shift(merged: &Matrix, items: &[Matrix]) -> Result<f64> {
    let mean = weighted_mean(items, &vec![1.0; items.len()])?;
    Ok(merged.sub(&mean)?.frobenius_norm())
}

/// Merges one layer's payloads into `layer.residual`; returns the distance
/// of the merged payload from the unweighted client mean.
fn merge_layer(
    layer: &mut LinearLayer,
    payloads: &[&LayerPayload],
    grams: Option<&[GramStat]>,
    weights: &[f64],
    cfg: &FederationConfig,
) -> Result<f64> {
    let closed_form = matches!(cfg.strategy, Strategy::Lorm | Strategy::LormOnlyB | Strategy::LormTaskMean);
    let need_grams = || grams.ok_or_else(|| LormError::Protocol("closed-form merge without grams".into()));
    let w0 = layer.w0.clone();
    match &mut layer.residual {
        Residual::Lora(m) => match payloads[0] {
            LayerPayload::B(_) => {
                let bs = payloads.iter().map(|p| expect_matrix(p, "b").cloned()).collect::<Result<Vec<_>>>()?;
                m.b = if closed_form {
                    merge_b_fixed_a(&bs, &m.a, need_grams()?, cfg.ridge)?
                } else {
                    weighted_mean(&bs, weights)?
                };
                mat_shift(&m.b, &bs)
            }
            LayerPayload::A(_) => {
                let a_list = payloads.iter().map(|p| expect_matrix(p, "a").cloned()).collect::<Result<Vec<_>>>()?;
                m.a = if closed_form {
                    merge_a_fixed_b(&a_list, need_grams()?, cfg.ridge)?
                } else {
                    weighted_mean(&a_list, weights)?
                };
                mat_shift(&m.a, &a_list)
            }
            LayerPayload::BothFactors { .. } => {
                let mut bs = Vec::new();
                let mut a_list = Vec::new();
                for p in payloads {
                    let LayerPayload::BothFactors { b, a } = p else {
                        return Err(LormError::Protocol("mixed payload kinds in one round".into()));
                    };
                    bs.push(b.clone());
                    a_list.push(a.clone());
                }
                m.b = weighted_mean(&bs, weights)?;
                m.a = weighted_mean(&a_list, weights)?;
                Ok(mat_shift(&m.b, &bs)?.hypot(mat_shift(&m.a, &a_list)?))
            }
            other => Err(LormError::Protocol(format!("LoRA layer got payload {other:?}"))),
        },
        Residual::Vera(m) => match payloads[0] {
            LayerPayload::LambdaB(_) => {
                let items = payloads.iter().map(|p| expect_vector(p, "lambda_b").cloned()).collect::<Result<Vec<_>>>()?;
                m.lambda_b = if closed_form {
                    merge_vera_lambda_b_with(
                        &items,
                        &m.lambda_d,
                        &m.a_frozen,
                        &m.b_frozen,
                        need_grams()?,
                        cfg.ridge,
                        cfg.scale_projection,
                    )?
                } else {
                    weighted_mean_vec(&items, weights)?
                };
                vec_shift(&m.lambda_b, &items)
            }
            LayerPayload::LambdaD(_) => {
                let items = payloads.iter().map(|p| expect_vector(p, "lambda_d").cloned()).collect::<Result<Vec<_>>>()?;
                m.lambda_d = if closed_form {
                    merge_vera_lambda_d_with(&items, &m.a_frozen, need_grams()?, cfg.ridge, cfg.scale_projection)?
                } else {
                    weighted_mean_vec(&items, weights)?
                };
                vec_shift(&m.lambda_d, &items)
            }
            LayerPayload::BothLambdas { .. } => {
                let mut lbs = Vec::new();
                let mut lds = Vec::new();
                for p in payloads {
                    let LayerPayload::BothLambdas { lambda_b, lambda_d } = p else {
                        return Err(LormError::Protocol("mixed payload kinds in one round".into()));
                    };
                    lbs.push(lambda_b.clone());
                    lds.push(lambda_d.clone());
                }
                m.lambda_b = weighted_mean_vec(&lbs, weights)?;
                m.lambda_d = weighted_mean_vec(&lds, weights)?;
                Ok(vec_shift(&m.lambda_b, &lbs)?.hypot(vec_shift(&m.lambda_d, &lds)?))
            }
            other => Err(LormError::Protocol(format!("VeRA layer got payload {other:?}"))),
        },
        Residual::Ia3(m) => {
            let items = payloads.iter().map(|p| expect_vector(p, "ell").cloned()).collect::<Result<Vec<_>>>()?;
            m.ell = if closed_form {
                merge_ia3_with(&items, &w0, need_grams()?, cfg.ridge, cfg.scale_projection)?
            } else {
                weighted_mean_vec(&items, weights)?
            };
            vec_shift(&m.ell, &items)
        }
        Residual::Dense(delta) => {
            let items = payloads.iter().map(|p| expect_matrix(p, "dense").cloned()).collect::<Result<Vec<_>>>()?;
            *delta = if cfg.strategy == Strategy::RegmeanFull {
                regmean_merge(&MergeInput::from_parts(&items, need_grams()?)?, cfg.ridge)?
            } else {
                weighted_mean(&items, weights)?
            };
            mat_shift(delta, &items)
        }
        Residual::None => Err(LormError::Protocol("merge into a layer without residual".into())),
    }
}
