mod common;

use lorm_core::data::make_synthetic_dataset;
use lorm_core::fcil::{ClientPartition, TaskHead};
use lorm_core::linalg::{GramStat, Matrix};
use lorm_core::peft::{init_lora, Residual};
use lorm_core::train::{
    ace_masked_loss, collect_gram, local_train, random_backbone, MlpModel, SgdConfig, Trainable,
};

#[test]
fn nearest_centroid_separates_the_blobs() {
    let data = make_synthetic_dataset(20, 32, 200, 100, 0.1, 73).unwrap();
    let mut sums = vec![vec![0.0; 32]; 20];
    let mut counts = vec![0usize; 20];
    for &i in &data.train_indices {
        counts[data.labels[i]] += 1;
        for (s, f) in sums[data.labels[i]].iter_mut().zip(data.features.col(i)) {
            *s += f;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let correct = data
        .test_indices
        .iter()
        .filter(|&&i| {
            let x = data.features.col(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..20).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == data.labels[i]
        })
        .count();
    let acc = correct as f64 / data.test_indices.len() as f64;
    assert!(acc >= 0.99, "centroid accuracy {acc}");
}

#[test]
fn dataset_is_seeded_and_noise_free_at_zero_std() {
    let a = make_synthetic_dataset(4, 8, 5, 2, 0.3, 9).unwrap();
    let b = make_synthetic_dataset(4, 8, 5, 2, 0.3, 9).unwrap();
    assert_eq!(a, b);
    let clean = make_synthetic_dataset(4, 8, 5, 2, 0.0, 9).unwrap();
    for i in 0..clean.len() {
        let label = clean.labels[i];
        assert_eq!(clean.features.col(i), clean.means.col(label));
    }
    assert!(make_synthetic_dataset(1, 8, 5, 2, 0.1, 9).is_err());
}

fn lora_model(classes: &[usize], seed: u64) -> MlpModel {
    let mut layers = random_backbone(&[32, 64, 64], seed);
    for (l, layer) in layers.iter_mut().enumerate() {
        layer.residual = Residual::Lora(init_lora(layer.out_dim(), layer.in_dim(), 4, seed + l as u64).unwrap());
    }
    let mut rng = common::rng(seed, 5);
    let head = TaskHead {
        task_id: 1,
        class_ids: classes.to_vec(),
        weight: Matrix::gaussian(classes.len(), 64, 0.01, &mut rng),
        bias: vec![0.0; classes.len()],
    };
    MlpModel::new(layers, vec![head]).unwrap()
}

fn accuracy(model: &MlpModel, x: &Matrix, y: &[usize]) -> f64 {
    let logits = model.forward(x).unwrap().logits;
    let ids = model.class_ids();
    let pred = lorm_core::fcil::predict(&logits);
    pred.iter().zip(y).filter(|(&p, &t)| ids[p] == t).count() as f64 / y.len() as f64
}

#[test]
fn two_blob_task_is_learned() {
    let data = make_synthetic_dataset(2, 32, 100, 0, 0.25, 61).unwrap();
    let model = lora_model(&[0, 1], 61);
    let part = ClientPartition {
        task_id: 1,
        client_id: 0,
        indices: data.train_indices.clone(),
    };
    let sgd = SgdConfig {
        learning_rate: 0.1,
        epochs: 5,
        batch_size: 8,
        seed: 61,
    };
    let out = local_train(&model, &data, &part, Trainable::LoraB, &sgd).unwrap();
    let (x, y) = data.batch(&data.train_indices);
    let acc = accuracy(&out.model, &x, &y);
    assert!(acc >= 0.95, "training accuracy {acc}");
    assert!(out.steps == 5 * 200usize.div_ceil(8));
}

#[test]
fn training_contracts() {
    let data = make_synthetic_dataset(3, 32, 20, 0, 0.3, 5).unwrap();
    let mut model = lora_model(&[0, 1, 2], 5);
    // a nonzero B so the A gradient is live
    let mut rng = common::rng(5, 6);
    for layer in &mut model.layers {
        if let Residual::Lora(m) = &mut layer.residual {
            m.b = Matrix::gaussian(m.b.rows(), m.b.cols(), 0.1, &mut rng);
        }
    }
    let part = ClientPartition {
        task_id: 1,
        client_id: 0,
        indices: data.train_indices.clone(),
    };
    let sgd = |lr| SgdConfig {
        learning_rate: lr,
        epochs: 2,
        batch_size: 7,
        seed: 1,
    };

    let still = local_train(&model, &data, &part, Trainable::LoraBoth, &sgd(0.0)).unwrap();
    assert_eq!(still.model, model);

    let factors = |m: &MlpModel| -> Vec<(Matrix, Matrix)> {
        m.layers
            .iter()
            .map(|l| match &l.residual {
                Residual::Lora(r) => (r.b.clone(), r.a.clone()),
                _ => unreachable!(),
            })
            .collect()
    };
    let before = factors(&model);
    let b_round = local_train(&model, &data, &part, Trainable::LoraB, &sgd(0.1)).unwrap();
    assert_eq!(b_round.model.frozen_fingerprint(), model.frozen_fingerprint());
    for ((b0, a0), (b1, a1)) in before.iter().zip(factors(&b_round.model)) {
        assert_eq!(a0, &a1);
        assert_ne!(b0, &b1);
    }
    let a_round = local_train(&model, &data, &part, Trainable::LoraA, &sgd(0.1)).unwrap();
    for ((b0, a0), (b1, a1)) in before.iter().zip(factors(&a_round.model)) {
        assert_eq!(b0, &b1);
        assert_ne!(a0, &a1);
    }

    let again = local_train(&model, &data, &part, Trainable::LoraB, &sgd(0.1)).unwrap();
    assert_eq!(again.model, b_round.model);

    let empty = ClientPartition {
        indices: vec![],
        ..part.clone()
    };
    assert!(local_train(&model, &data, &empty, Trainable::LoraB, &sgd(0.1)).is_err());
    assert!(local_train(&model, &data, &part, Trainable::Ia3, &sgd(0.1)).is_err());
}

#[test]
fn ace_examples() {
    let logits = Matrix::from_rows(&[vec![3.0, -1.0], vec![0.5, 7.0], vec![0.5, 7.0]]).unwrap();
    let (loss, grad) = ace_masked_loss(&logits, &[2, 2], 2..3).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad.max_abs(), 0.0);

    let flat = Matrix::zeros(5, 4);
    let (loss, grad) = ace_masked_loss(&flat, &[2, 3, 4, 2], 2..5).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
    assert_eq!(grad.row_block(0, 2).max_abs(), 0.0);

    assert!(ace_masked_loss(&flat, &[0], 2..5).is_err());
}

#[test]
fn gram_collection_examples() {
    let data = make_synthetic_dataset(2, 32, 10, 0, 0.3, 71).unwrap();
    let layers = random_backbone(&[32, 64, 64], 71);
    let one = collect_gram(&layers, &data, &[3], 1.0, 1.0).unwrap();
    let x = data.features.select_cols(&[3]);
    let outer = x.matmul_t(&x).unwrap();
    assert!(one.backbone[0].gram.rel_diff(&outer) <= 1e-15);
    assert_eq!(one.backbone[0].samples, 1);

    let diag = collect_gram(&layers, &data, &data.train_indices, 0.0, 0.5).unwrap();
    assert!(diag.backbone.iter().all(|g| g.diagonal_only));
    assert!(!diag.classifier.diagonal_only);

    let half = data.train_indices.len() / 2;
    let a = collect_gram(&layers, &data, &data.train_indices[..half], 1.0, 1.0).unwrap();
    let b = collect_gram(&layers, &data, &data.train_indices[half..], 1.0, 1.0).unwrap();
    let whole = collect_gram(&layers, &data, &data.train_indices, 1.0, 1.0).unwrap();
    for l in 0..2 {
        let sum = GramStat::sum([&a.backbone[l], &b.backbone[l]]).unwrap();
        assert!(sum.gram.rel_diff(&whole.backbone[l].gram) <= 1e-10);
    }
    assert!(collect_gram(&layers, &data, &[], 1.0, 1.0).is_err());
}
