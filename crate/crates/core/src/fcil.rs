//! Class-incremental task construction, Dirichlet client partitioning,
//! per-task heads and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::linalg::Matrix;
use crate::merge::assemble_classifier;
use crate::seed::{rng_for, Stream};

/// One incremental task: a disjoint set of classes and their examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task index.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// The examples of one task held by one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub task_id: usize,
    /// 0-based client index.
    pub client_id: usize,
    pub indices: Vec<usize>,
}

/// Class counts per task with the remainder on the last task, e.g. 196
/// classes over 10 tasks gives nine tasks of 20 and a final task of 16.
pub fn balanced_class_split(classes: usize, tasks: usize) -> Result<Vec<usize>> {
    if tasks == 0 || tasks > classes {
        return Err(LormError::invalid(format!(
            "cannot split {classes} classes into {tasks} tasks"
        )));
    }
    let per = classes.div_ceil(tasks);
    let mut sizes = vec![per; tasks - 1];
    let used = per * (tasks - 1);
    if used >= classes {
        // fall back to floor division when ceil leaves nothing for the last task
        let per = classes / tasks;
        let mut sizes = vec![per; tasks];
        sizes[tasks - 1] += classes - per * tasks;
        return Ok(sizes);
    }
    sizes.push(classes - used);
    Ok(sizes)
}

/// Assigns classes to tasks in ascending class-id order.
///
/// `labels[i]` is the class of example `i`; `train` and `test` list the
/// example indices of each split.
pub fn split_tasks(
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    classes_per_task: &[usize],
) -> Result<Vec<TaskSpec>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let requested: usize = classes_per_task.iter().sum();
    if requested != classes.len() {
        return Err(LormError::invalid(format!(
            "classes_per_task sums to {requested} but the dataset has {} classes",
            classes.len()
        )));
    }
    if classes_per_task.contains(&0) {
        return Err(LormError::invalid("every task needs at least one class"));
    }
    let mut task_of_class = BTreeMap::new();
    let mut tasks = Vec::with_capacity(classes_per_task.len());
    let mut cursor = 0;
    for (t, &count) in classes_per_task.iter().enumerate() {
        let class_ids = classes[cursor..cursor + count].to_vec();
        for &c in &class_ids {
            task_of_class.insert(c, t);
        }
        cursor += count;
        tasks.push(TaskSpec {
            task_id: t + 1,
            class_ids,
            train_indices: Vec::new(),
            test_indices: Vec::new(),
        });
    }
    for &i in train {
        tasks[task_of_class[&labels[i]]].train_indices.push(i);
    }
    for &i in test {
        tasks[task_of_class[&labels[i]]].test_indices.push(i);
    }
    Ok(tasks)
}

/// Largest-remainder rounding of `proportions * total` to integers summing to `total`.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // largest fractional part first, lower client id on ties
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `p ~ Dir(beta 1_N)` through normalized Gamma variates.
fn dirichlet_proportions<R: rand::Rng + ?Sized>(n: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta checked positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every variate underflowed: put all mass on the largest draw
        let best = draws
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        (0..n).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

/// Splits a task's training examples across `n` clients with a per-class
/// Dirichlet draw, then repairs empty clients by moving one example from the
/// most loaded client.
pub fn dirichlet_partition(
    task: &TaskSpec,
    labels: &[usize],
    n: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    if n == 0 {
        return Err(LormError::invalid("need at least one client"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(LormError::invalid(format!("beta must be positive, got {beta}")));
    }
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &class in &task.class_ids {
        let mut members: Vec<usize> = task
            .train_indices
            .iter()
            .copied()
            .filter(|&i| labels[i] == class)
            .collect();
        let mut rng = rng_for(seed, Stream::Partition, &[task.task_id as u64, class as u64]);
        let proportions = dirichlet_proportions(n, beta, &mut rng);
        let counts = largest_remainder(&proportions, members.len());
        members.shuffle(&mut rng);
        let mut offset = 0;
        for (client, &c) in counts.iter().enumerate() {
            per_client[client].extend_from_slice(&members[offset..offset + c]);
            offset += c;
        }
    }
    let total: usize = per_client.iter().map(Vec::len).sum();
    if total < n {
        return Err(LormError::invalid(format!(
            "task {} has {total} training examples, fewer than the {n} clients",
            task.task_id
        )));
    }
    for v in &mut per_client {
        v.sort_unstable();
    }
    while let Some(empty) = per_client.iter().position(Vec::is_empty) {
        let donor = (0..n)
            .max_by(|&a, &b| per_client[a].len().cmp(&per_client[b].len()).then(b.cmp(&a)))
            .expect("n >= 1");
        let moved = per_client[donor].pop().expect("donor is the largest client");
        per_client[empty].push(moved);
    }
    Ok(per_client
        .into_iter()
        .enumerate()
        .map(|(client_id, indices)| ClientPartition {
            task_id: task.task_id,
            client_id,
            indices,
        })
        .collect())
}

/// Audit manifest: task id -> client id -> example indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub tasks: BTreeMap<usize, BTreeMap<usize, Vec<usize>>>,
}

impl PartitionManifest {
    pub fn from_partitions(partitions: &[Vec<ClientPartition>]) -> Self {
        let mut tasks = BTreeMap::new();
        for task in partitions {
            for p in task {
                tasks
                    .entry(p.task_id)
                    .or_insert_with(BTreeMap::new)
                    .insert(p.client_id, p.indices.clone());
            }
        }
        PartitionManifest { tasks }
    }
}

/// Final average accuracy: the mean of per-task accuracies.
pub fn faa(per_task_accuracy: &[f64]) -> Result<f64> {
    if per_task_accuracy.is_empty() {
        return Err(LormError::invalid("FAA of an empty accuracy list"));
    }
    Ok(per_task_accuracy.iter().sum::<f64>() / per_task_accuracy.len() as f64)
}

/// Classifier head of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TaskHead {
    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Frozen heads of completed tasks, in task order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    pub heads: Vec<TaskHead>,
}

impl HeadBank {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(TaskHead::classes).sum()
    }

    pub fn push(&mut self, head: TaskHead) -> Result<()> {
        let expected = self.heads.len() + 1;
        if head.task_id != expected {
            return Err(LormError::Protocol(format!(
                "head for task {} pushed where task {expected} was expected",
                head.task_id
            )));
        }
        self.heads.push(head);
        Ok(())
    }

    /// Unified classifier: weights and biases concatenated in task order,
    /// plus the class id of every output row.
    pub fn assemble(&self) -> Result<(Matrix, Vec<f64>, Vec<usize>)> {
        let weights: Vec<Matrix> = self.heads.iter().map(|h| h.weight.clone()).collect();
        let weight = assemble_classifier(&weights)?;
        let bias = self.heads.iter().flat_map(|h| h.bias.iter().copied()).collect();
        let classes = self.heads.iter().flat_map(|h| h.class_ids.iter().copied()).collect();
        Ok((weight, bias, classes))
    }
}

/// Anything that scores examples over the full set of seen classes.
pub trait Classifier {
    /// Class id of each logit row.
    fn class_ids(&self) -> &[usize];

    /// Logits for a `dim x n` batch, one row per class in [`Classifier::class_ids`] order.
    fn logits(&self, inputs: &Matrix) -> Result<Matrix>;
}

/// Argmax over every row; ties go to the lowest row index.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..logits.rows() {
                if logits.get(i, j) > logits.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Class-incremental accuracy of each task's test split, scoring all classes
/// together (no task identity is given to the classifier).
pub fn evaluate_final<C: Classifier + ?Sized>(
    model: &C,
    features: &Matrix,
    labels: &[usize],
    tasks: &[TaskSpec],
) -> Result<Vec<f64>> {
    let class_ids = model.class_ids();
    for t in tasks {
        if let Some(c) = t.class_ids.iter().find(|c| !class_ids.contains(c)) {
            return Err(LormError::invalid(format!(
                "classifier has no output for class {c} of task {}",
                t.task_id
            )));
        }
    }
    tasks
        .iter()
        .map(|t| {
            if t.test_indices.is_empty() {
                return Err(LormError::invalid(format!("task {} has no test examples", t.task_id)));
            }
            let x = features.select_cols(&t.test_indices);
            let rows = predict(&model.logits(&x)?);
            let correct = rows
                .iter()
                .zip(&t.test_indices)
                .filter(|(&row, &i)| class_ids[row] == labels[i])
                .count();
            Ok(correct as f64 / t.test_indices.len() as f64)
        })
        .collect()
}
