//! Weight snapshots on disk and the offline merge over them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::linalg::{GramStat, Matrix};
use crate::merge::{merge_a_fixed_b, merge_b_fixed_a, merge_task_residuals, objective_omega, regmean_merge, MergeInput};

/// One layer of a snapshot. `weight` is the payload being merged (a dense
/// weight, a residual, or one LoRA factor); `gram` is the input Gram of the
/// layer; `shared_a` is the frozen `A` needed to merge `B` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotLayer {
    pub name: String,
    pub weight: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram: Option<GramStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_a: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub layers: Vec<SnapshotLayer>,
}

impl Snapshot {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LormError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| LormError::JsonFile {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| LormError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeKind {
    /// Dense weights, Gram-weighted.
    Regmean,
    /// LoRA `B` factors with a shared `A`.
    LoraB,
    /// LoRA `A` factors.
    LoraA,
    /// Per-task dense residuals with task Grams.
    TaskResiduals,
}

impl std::str::FromStr for MergeKind {
    type Err = LormError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regmean" => Ok(MergeKind::Regmean),
            "lora-b" => Ok(MergeKind::LoraB),
            "lora-a" => Ok(MergeKind::LoraA),
            "task-residuals" => Ok(MergeKind::TaskResiduals),
            other => Err(LormError::Config(format!("unknown merge kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOmega {
    pub name: String,
    /// Objective of each input's own weight against all contributors.
    pub before: Vec<f64>,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaReport {
    pub kind: MergeKind,
    pub inputs: Vec<PathBuf>,
    pub layers: Vec<LayerOmega>,
}

/// Merges shape-compatible snapshots layer by layer. `gamma` decays
/// off-diagonal Gram entries before merging.
pub fn merge_offline(
    inputs: &[(PathBuf, Snapshot)],
    kind: MergeKind,
    gamma: Option<f64>,
    ridge: f64,
) -> Result<(Snapshot, OmegaReport)> {
    let (first_path, first) = inputs
        .first()
        .ok_or_else(|| LormError::invalid("merge needs at least one snapshot"))?;
    let names: Vec<&str> = first.layers.iter().map(|l| l.name.as_str()).collect();
    for (path, snap) in &inputs[1..] {
        let other: Vec<&str> = snap.layers.iter().map(|l| l.name.as_str()).collect();
        if other != names {
            return Err(LormError::invalid(format!(
                "{} has layers {other:?}, {} has {names:?}",
                path.display(),
                first_path.display()
            )));
        }
    }
    let mut merged_layers = Vec::with_capacity(names.len());
    let mut omegas = Vec::with_capacity(names.len());
    for (l, name) in names.iter().enumerate() {
        let layer = |i: usize| &inputs[i].1.layers[l];
        let shape = layer(0).weight.shape();
        let offending: Vec<String> = (0..inputs.len())
            .filter(|&i| layer(i).weight.shape() != shape)
            .map(|i| inputs[i].0.display().to_string())
            .collect();
        if !offending.is_empty() {
            return Err(LormError::invalid(format!(
                "layer '{name}': weight shape differs from {} ({}x{}) in {}",
                first_path.display(),
                shape.0,
                shape.1,
                offending.join(", ")
            )));
        }
        let missing: Vec<String> = (0..inputs.len())
            .filter(|&i| layer(i).gram.is_none())
            .map(|i| inputs[i].0.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(LormError::invalid(format!(
                "layer '{name}': no gram in {}",
                missing.join(", ")
            )));
        }
        let mut grams = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let g = layer(i).gram.clone().expect("checked above");
            let g = match gamma {
                Some(gamma) => g.decay_off_diagonal(gamma)?,
                None => g,
            };
            grams.push(g);
        }
        let k = grams[0].dim();
        let bad_gram: Vec<String> = (0..inputs.len())
            .filter(|&i| grams[i].dim() != k)
            .map(|i| inputs[i].0.display().to_string())
            .collect();
        if !bad_gram.is_empty() {
            return Err(LormError::invalid(format!(
                "layer '{name}': gram dimension differs from {k} in {}",
                bad_gram.join(", ")
            )));
        }
        let weights: Vec<Matrix> = (0..inputs.len()).map(|i| layer(i).weight.clone()).collect();
        let context = |e: LormError| LormError::invalid(format!("layer '{name}': {e}"));

        let (merged, shared_a, dense_inputs, dense_merged) = match kind {
            MergeKind::Regmean | MergeKind::TaskResiduals => {
                let m = if kind == MergeKind::Regmean {
                    regmean_merge(&MergeInput::from_parts(&weights, &grams)?, ridge)
                } else {
                    merge_task_residuals(&weights, &grams, ridge)
                }
                .map_err(context)?;
                (m.clone(), None, weights.clone(), m)
            }
            MergeKind::LoraA => {
                let m = merge_a_fixed_b(&weights, &grams, ridge).map_err(context)?;
                (m.clone(), None, weights.clone(), m)
            }
            MergeKind::LoraB => {
                let a = layer(0)
                    .shared_a
                    .clone()
                    .ok_or_else(|| LormError::invalid(format!("layer '{name}': lora-b merge needs shared_a in {}", first_path.display())))?;
                let differ: Vec<String> = (0..inputs.len())
                    .filter(|&i| layer(i).shared_a.as_ref() != Some(&a))
                    .map(|i| inputs[i].0.display().to_string())
                    .collect();
                if !differ.is_empty() {
                    return Err(LormError::invalid(format!(
                        "layer '{name}': shared_a differs from {} in {}",
                        first_path.display(),
                        differ.join(", ")
                    )));
                }
                let m = merge_b_fixed_a(&weights, &a, &grams, ridge).map_err(context)?;
                let dense = weights.iter().map(|b| b.matmul(&a)).collect::<Result<Vec<_>>>()?;
                let dense_m = m.matmul(&a)?;
                (m, Some(a), dense, dense_m)
            }
        };
        let objective = MergeInput::from_parts(&dense_inputs, &grams)?;
        let before = dense_inputs
            .iter()
            .map(|w| objective_omega(w, &objective))
            .collect::<Result<Vec<_>>>()?;
        omegas.push(LayerOmega {
            name: name.to_string(),
            before,
            after: objective_omega(&dense_merged, &objective)?,
        });
        merged_layers.push(SnapshotLayer {
            name: name.to_string(),
            weight: merged,
            gram: Some(GramStat::sum(grams.iter())?),
            shared_a,
        });
    }
    Ok((
        Snapshot { layers: merged_layers },
        OmegaReport {
            kind,
            inputs: inputs.iter().map(|(p, _)| p.clone()).collect(),
            layers: omegas,
        },
    ))
}
