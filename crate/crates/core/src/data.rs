//! Synthetic class-conditional Gaussian blobs used in place of image datasets.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::linalg::Matrix;
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// `dim x examples`, one example per column.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub means: Matrix,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SyntheticDataset {
    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature columns and labels of the given examples.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let x = self.features.select_cols(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Class means are independent Gaussian directions scaled to unit norm;
/// each example is its class mean plus isotropic noise of std `blob_std`.
/// Examples are laid out class by class, train examples before test examples.
pub fn make_synthetic_dataset(
    classes: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    blob_std: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(LormError::invalid("a dataset needs at least two classes"));
    }
    if dim == 0 {
        return Err(LormError::invalid("feature dimension must be positive"));
    }
    if !(blob_std >= 0.0) || !blob_std.is_finite() {
        return Err(LormError::invalid(format!("blob_std must be non-negative, got {blob_std}")));
    }
    let mut mean_rng = rng_for(seed, Stream::Data, &[0]);
    let mut means = Matrix::zeros(dim, classes);
    for c in 0..classes {
        let v = Matrix::gaussian(dim, 1, 1.0, &mut mean_rng);
        let norm = v.frobenius_norm().max(f64::MIN_POSITIVE);
        for i in 0..dim {
            means.set(i, c, v.get(i, 0) / norm);
        }
    }

    let per_class = per_class_train + per_class_test;
    let total = classes * per_class;
    let mut features = Matrix::zeros(dim, total);
    let mut labels = Vec::with_capacity(total);
    let mut train_indices = Vec::with_capacity(classes * per_class_train);
    let mut test_indices = Vec::with_capacity(classes * per_class_test);
    let noise = (blob_std > 0.0).then(|| Normal::new(0.0, blob_std).expect("std is positive"));
    for c in 0..classes {
        let mut rng = rng_for(seed, Stream::Data, &[1, c as u64]);
        for e in 0..per_class {
            let col = c * per_class + e;
            for i in 0..dim {
                let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                features.set(i, col, means.get(i, c) + eps);
            }
            labels.push(c);
            if e < per_class_train {
                train_indices.push(col);
            } else {
                test_indices.push(col);
            }
        }
    }
    Ok(SyntheticDataset {
        features,
        labels,
        classes,
        means,
        train_indices,
        test_indices,
    })
}
