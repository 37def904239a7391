//! Desk-scale MLP, local SGD with per-task heads, and Gram collection.
//!
//! The backbone is a stack of [`LinearLayer`]s with ReLU after each one; the
//! classifier is one head per task. Training a task only touches the chosen
//! residual parameters and the newest head; the loss is cross-entropy over
//! that head's classes (the other heads get exactly zero gradient).

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_dataset, SyntheticDataset};
use crate::error::{LormError, Result};
use crate::fcil::{ClientPartition, TaskHead};
use crate::linalg::{GramStat, Matrix};
use crate::peft::{LinearLayer, Residual};
use crate::seed::{rng_for, Stream};

/// Which parameters of the residuals are updated in a training call.
/// The current task head is always trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    LoraB,
    LoraA,
    LoraBoth,
    VeraLambdaB,
    VeraLambdaD,
    VeraBoth,
    Ia3,
    Full,
    HeadOnly,
}

impl Trainable {
    fn wants(self, part: Part) -> bool {
        use Trainable::*;
        matches!(
            (self, part),
            (LoraB | LoraBoth, Part::LoraB)
                | (LoraA | LoraBoth, Part::LoraA)
                | (VeraLambdaB | VeraBoth, Part::LambdaB)
                | (VeraLambdaD | VeraBoth, Part::LambdaD)
                | (Ia3, Part::Ell)
                | (Full, Part::Dense)
        )
    }

    fn compatible(self, residual: &Residual) -> bool {
        use Trainable::*;
        match self {
            HeadOnly => true,
            LoraB | LoraA | LoraBoth => matches!(residual, Residual::Lora(_)),
            VeraLambdaB | VeraLambdaD | VeraBoth => matches!(residual, Residual::Vera(_)),
            Ia3 => matches!(residual, Residual::Ia3(_)),
            Full => matches!(residual, Residual::Dense(_)),
        }
    }
}

#[derive(Clone, Copy)]
enum Part {
    LoraB,
    LoraA,
    LambdaB,
    LambdaD,
    Ell,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(LormError::invalid("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LormError::invalid("epochs and batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Backbone layers plus every task head seen so far; the last head is the
/// one being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<LinearLayer>,
    pub heads: Vec<TaskHead>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of each backbone layer (the last entry feeds the heads).
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each backbone layer.
    pub pre_activations: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("inputs always holds the network input")
    }
}

fn relu(z: &Matrix) -> Matrix {
    z.map(|v| v.max(0.0))
}

/// Runs the backbone, returning every layer input and pre-activation.
pub fn backbone_forward(layers: &[LinearLayer], x: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(layers.len());
    for layer in layers {
        let z = layer.forward(inputs.last().expect("non-empty"))?;
        inputs.push(relu(&z));
        pre.push(z);
    }
    Ok((inputs, pre))
}

impl MlpModel {
    pub fn new(layers: Vec<LinearLayer>, heads: Vec<TaskHead>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(LormError::DimensionMismatch {
                    op: "MlpModel::new",
                    left: pair[0].w0.shape(),
                    right: pair[1].w0.shape(),
                });
            }
        }
        let feat = layers.last().map(LinearLayer::out_dim);
        for h in &heads {
            if Some(h.weight.cols()) != feat || h.bias.len() != h.weight.rows() {
                return Err(LormError::invalid(format!(
                    "head of task {} does not fit the backbone",
                    h.task_id
                )));
            }
        }
        Ok(MlpModel { layers, heads })
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    /// Logit rows of the newest head.
    pub fn current_rows(&self) -> Range<usize> {
        let before: usize = self.heads[..self.heads.len().saturating_sub(1)]
            .iter()
            .map(TaskHead::classes)
            .sum();
        before..before + self.heads.last().map_or(0, TaskHead::classes)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.heads.iter().flat_map(|h| h.class_ids.iter().copied()).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        let (inputs, pre_activations) = backbone_forward(&self.layers, x)?;
        let features = inputs.last().expect("non-empty");
        let blocks = self
            .heads
            .iter()
            .map(|h| h.weight.matmul(features)?.add_to_rows(&h.bias))
            .collect::<Result<Vec<_>>>()?;
        let logits = Matrix::vstack(&blocks)?;
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            logits,
        })
    }

    /// Deterministic digest of every frozen value (`W0` and biases).
    pub fn frozen_fingerprint(&self) -> Vec<u64> {
        self.layers
            .iter()
            .flat_map(|l| l.w0.as_slice().iter().chain(&l.bias).map(|v| v.to_bits()))
            .collect()
    }
}

/// Cross-entropy over the logit rows `current`, averaged over the batch.
///
/// `labels` are logit-row indices. Returns the loss and its gradient with
/// respect to all logits; rows outside `current` are exactly zero.
pub fn ace_masked_loss(logits: &Matrix, labels: &[usize], current: Range<usize>) -> Result<(f64, Matrix)> {
    let n = logits.cols();
    if labels.len() != n {
        return Err(LormError::DimensionMismatch {
            op: "ace_masked_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if current.is_empty() || current.end > logits.rows() {
        return Err(LormError::invalid(format!(
            "current class rows {current:?} do not fit {} logits",
            logits.rows()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| !current.contains(l)) {
        return Err(LormError::invalid(format!(
            "label row {bad} is outside the current task rows {current:?}"
        )));
    }
    let mut grad = Matrix::zeros(logits.rows(), n);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for j in 0..n {
        let max = current
            .clone()
            .map(|i| logits.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for i in current.clone() {
            denom += (logits.get(i, j) - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(logits.get(labels[j], j) - max - log_denom);
        for i in current.clone() {
            let p = (logits.get(i, j) - max - log_denom).exp();
            let target = if i == labels[j] { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Gradients of the trainable parts of one backbone layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGradient {
    pub lora_b: Option<Matrix>,
    pub lora_a: Option<Matrix>,
    pub lambda_b: Option<Vec<f64>>,
    pub lambda_d: Option<Vec<f64>>,
    pub ell: Option<Vec<f64>>,
    pub dense: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    /// Gradient with respect to every logit row (zero outside the current head).
    pub all_head_weights: Matrix,
}

fn row_dot(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
        .collect()
}

/// Backward through one layer: parameter gradients plus the gradient with
/// respect to the layer input (when `need_input_grad`).
fn layer_backward(
    layer: &LinearLayer,
    x: &Matrix,
    dz: &Matrix,
    trainable: Trainable,
    need_input_grad: bool,
) -> Result<(LayerGradient, Option<Matrix>)> {
    let mut g = LayerGradient::default();
    let mut dx = if need_input_grad {
        Some(layer.w0.t_matmul(dz)?)
    } else {
        None
    };
    match &layer.residual {
        Residual::None => {}
        Residual::Lora(m) => {
            let u = m.a.matmul(x)?;
            if trainable.wants(Part::LoraB) {
                g.lora_b = Some(dz.matmul_t(&u)?);
            }
            let dv = m.b.t_matmul(dz)?;
            if trainable.wants(Part::LoraA) {
                g.lora_a = Some(dv.matmul_t(x)?);
            }
            if let Some(dx) = dx.as_mut() {
                dx.axpy(1.0, &m.a.t_matmul(&dv)?)?;
            }
        }
        Residual::Vera(m) => {
            let u = m.a_frozen.matmul(x)?;
            let v = u.scale_rows(&m.lambda_d)?;
            let w = m.b_frozen.matmul(&v)?;
            if trainable.wants(Part::LambdaB) {
                g.lambda_b = Some(row_dot(dz, &w));
            }
            let dw = dz.scale_rows(&m.lambda_b)?;
            let dv = m.b_frozen.t_matmul(&dw)?;
            if trainable.wants(Part::LambdaD) {
                g.lambda_d = Some(row_dot(&dv, &u));
            }
            if let Some(dx) = dx.as_mut() {
                let du = dv.scale_rows(&m.lambda_d)?;
                dx.axpy(1.0, &m.a_frozen.t_matmul(&du)?)?;
            }
        }
        Residual::Ia3(m) => {
            if trainable.wants(Part::Ell) {
                let wx = layer.w0.matmul(x)?;
                g.ell = Some(row_dot(dz, &wx));
            }
            if let Some(dx) = dx.as_mut() {
                dx.axpy(1.0, &layer.w0.t_matmul(&dz.scale_rows(&m.ell)?)?)?;
            }
        }
        Residual::Dense(delta) => {
            if trainable.wants(Part::Dense) {
                g.dense = Some(dz.matmul_t(x)?);
            }
            if let Some(dx) = dx.as_mut() {
                dx.axpy(1.0, &delta.t_matmul(dz)?)?;
            }
        }
    }
    Ok((g, dx))
}

/// Loss of a labelled batch and the gradients of every trainable parameter.
/// `labels` are class ids; they must belong to the newest head.
pub fn loss_and_gradients(
    model: &MlpModel,
    x: &Matrix,
    labels: &[usize],
    trainable: Trainable,
) -> Result<(f64, Gradients)> {
    let current = model.current_rows();
    let head = model
        .heads
        .last()
        .ok_or_else(|| LormError::invalid("model has no head to train"))?;
    let rows = labels
        .iter()
        .map(|l| {
            head.class_ids
                .iter()
                .position(|c| c == l)
                .map(|p| current.start + p)
                .ok_or_else(|| LormError::invalid(format!("label {l} is not a class of the current task")))
        })
        .collect::<Result<Vec<_>>>()?;
    let trace = model.forward(x)?;
    let (loss, dlogits) = ace_masked_loss(&trace.logits, &rows, current.clone())?;
    let features = trace.features();

    let all_head_weights = dlogits.matmul_t(features)?;
    let d_current = dlogits.row_block(current.start, current.end);
    let head_weight = d_current.matmul_t(features)?;
    let head_bias = d_current.row_sums();

    let mut dh = head.weight.t_matmul(&d_current)?;
    let mut layer_grads = vec![LayerGradient::default(); model.layers.len()];
    for li in (0..model.layers.len()).rev() {
        let z = &trace.pre_activations[li];
        let dz = Matrix::from_fn(z.rows(), z.cols(), |i, j| {
            if z.get(i, j) > 0.0 {
                dh.get(i, j)
            } else {
                0.0
            }
        });
        let (g, dx) = layer_backward(&model.layers[li], &trace.inputs[li], &dz, trainable, li > 0)?;
        layer_grads[li] = g;
        if let Some(dx) = dx {
            dh = dx;
        }
    }
    Ok((
        loss,
        Gradients {
            layers: layer_grads,
            head_weight,
            head_bias,
            all_head_weights,
        },
    ))
}

fn step_vec(v: &mut [f64], g: &[f64], lr: f64) {
    for (p, d) in v.iter_mut().zip(g) {
        *p -= lr * d;
    }
}

fn apply_gradients(model: &mut MlpModel, grads: &Gradients, lr: f64) -> Result<()> {
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        match &mut layer.residual {
            Residual::Lora(m) => {
                if let Some(d) = &g.lora_b {
                    m.b.axpy(-lr, d)?;
                }
                if let Some(d) = &g.lora_a {
                    m.a.axpy(-lr, d)?;
                }
            }
            Residual::Vera(m) => {
                if let Some(d) = &g.lambda_b {
                    step_vec(&mut m.lambda_b, d, lr);
                }
                if let Some(d) = &g.lambda_d {
                    step_vec(&mut m.lambda_d, d, lr);
                }
            }
            Residual::Ia3(m) => {
                if let Some(d) = &g.ell {
                    step_vec(&mut m.ell, d, lr);
                }
            }
            Residual::Dense(delta) => {
                if let Some(d) = &g.dense {
                    delta.axpy(-lr, d)?;
                }
            }
            Residual::None => {}
        }
    }
    let head = model.heads.last_mut().expect("checked by loss_and_gradients");
    head.weight.axpy(-lr, &grads.head_weight)?;
    step_vec(&mut head.bias, &grads.head_bias, lr);
    Ok(())
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub model: MlpModel,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Minibatch SGD over a client's partition.
///
/// Each epoch visits the partition in a fresh seeded order. Parameters outside
/// `trainable` (and every frozen weight) are returned bit-identical.
pub fn local_train(
    model: &MlpModel,
    data: &SyntheticDataset,
    partition: &ClientPartition,
    trainable: Trainable,
    cfg: &SgdConfig,
) -> Result<LocalOutcome> {
    if partition.indices.is_empty() {
        return Err(LormError::EmptyPartition {
            task: partition.task_id,
            client: partition.client_id,
        });
    }
    cfg.validate()?;
    if let Some(l) = model.layers.iter().find(|l| !trainable.compatible(&l.residual)) {
        return Err(LormError::invalid(format!(
            "{trainable:?} cannot train a {} residual",
            l.residual.kind()
        )));
    }
    let mut model = model.clone();
    let mut order = partition.indices.clone();
    let mut total_loss = 0.0;
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, Stream::Sgd, &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let (loss, grads) = loss_and_gradients(&model, &x, &y, trainable)?;
            apply_gradients(&mut model, &grads, cfg.learning_rate)?;
            total_loss += loss;
            steps += 1;
        }
    }
    Ok(LocalOutcome {
        model,
        mean_loss: total_loss / steps as f64,
        steps,
    })
}

/// Gram statistics of one forward pass over a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrams {
    /// Input Gram of each backbone layer.
    pub backbone: Vec<GramStat>,
    /// Gram of the features feeding the classifier heads.
    pub classifier: GramStat,
}

impl LayerGrams {
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a LayerGrams> + Clone) -> Result<LayerGrams> {
        let first = items
            .clone()
            .into_iter()
            .next()
            .ok_or_else(|| LormError::invalid("no gram statistics to sum"))?;
        let backbone = (0..first.backbone.len())
            .map(|l| GramStat::sum(items.clone().into_iter().map(|g| &g.backbone[l])))
            .collect::<Result<Vec<_>>>()?;
        let classifier = GramStat::sum(items.into_iter().map(|g| &g.classifier))?;
        Ok(LayerGrams { backbone, classifier })
    }

    pub fn transmitted_values(&self) -> (usize, usize) {
        (
            self.backbone.iter().map(GramStat::transmitted_values).sum(),
            self.classifier.transmitted_values(),
        )
    }
}

/// Accumulates each layer's input second moment over `indices` in one
/// forward pass, then decays off-diagonal entries (`gamma_backbone` for
/// backbone layers, `gamma_classifier` for the head input).
pub fn collect_gram(
    layers: &[LinearLayer],
    data: &SyntheticDataset,
    indices: &[usize],
    gamma_backbone: f64,
    gamma_classifier: f64,
) -> Result<LayerGrams> {
    if indices.is_empty() {
        return Err(LormError::invalid("collect_gram on an empty partition"));
    }
    let (x, _) = data.batch(indices);
    let (inputs, _) = backbone_forward(layers, &x)?;
    let backbone = inputs[..layers.len()]
        .iter()
        .map(|inp| GramStat::from_inputs(inp).decay_off_diagonal(gamma_backbone))
        .collect::<Result<Vec<_>>>()?;
    let classifier = GramStat::from_inputs(inputs.last().expect("non-empty"))
        .decay_off_diagonal(gamma_classifier)?;
    Ok(LayerGrams { backbone, classifier })
}

/// He-initialized frozen backbone (`dims[0] -> dims[1] -> ...`) with zero biases.
pub fn random_backbone(dims: &[usize], seed: u64) -> Vec<LinearLayer> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut rng = rng_for(seed, Stream::Backbone, &[i as u64]);
            let std = (2.0 / w[0] as f64).sqrt();
            LinearLayer {
                w0: Matrix::gaussian(w[1], w[0], std, &mut rng),
                bias: vec![0.0; w[1]],
                residual: Residual::None,
            }
        })
        .collect()
}

/// Settings of the pretext pre-training that produces the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub classes: usize,
    pub per_class: usize,
    pub blob_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            classes: 10,
            per_class: 100,
            blob_std: 0.1,
            steps: 200,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

/// Random backbone briefly trained on a disjoint synthetic pretext task,
/// then frozen (the learned deltas are folded into `W0`).
pub fn pretrain_backbone(dims: &[usize], pretext: &PretextConfig, seed: u64) -> Result<Vec<LinearLayer>> {
    let mut layers = random_backbone(dims, seed);
    if pretext.steps == 0 {
        return Ok(layers);
    }
    let data_seed = crate::seed::derive_seed(seed, Stream::Pretext, &[0]);
    let data = make_synthetic_dataset(pretext.classes, dims[0], pretext.per_class, 0, pretext.blob_std, data_seed)?;
    for l in &mut layers {
        l.residual = Residual::Dense(Matrix::zeros(l.out_dim(), l.in_dim()));
    }
    let feat = *dims.last().expect("dims non-empty");
    let mut rng = rng_for(seed, Stream::Pretext, &[1]);
    let head = TaskHead {
        task_id: 0,
        class_ids: (0..pretext.classes).collect(),
        weight: Matrix::gaussian(pretext.classes, feat, 0.01, &mut rng),
        bias: vec![0.0; pretext.classes],
    };
    let mut model = MlpModel::new(layers, vec![head])?;
    for _ in 0..pretext.steps {
        let batch: Vec<usize> = (0..pretext.batch_size)
            .map(|_| data.train_indices[rng.random_range(0..data.train_indices.len())])
            .collect();
        let (x, y) = data.batch(&batch);
        let (_, grads) = loss_and_gradients(&model, &x, &y, Trainable::Full)?;
        apply_gradients(&mut model, &grads, pretext.learning_rate)?;
    }
    Ok(model
        .layers
        .into_iter()
        .map(|l| {
            let w0 = l.w0.add(&l.residual_matrix()).expect("same shape");
            LinearLayer {
                w0,
                bias: l.bias,
                residual: Residual::None,
            }
        })
        .collect())
}
