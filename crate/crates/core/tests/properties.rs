mod common;

use common::*;
use lorm_core::fcil::{dirichlet_partition, faa, TaskSpec};
use lorm_core::linalg::{GramStat, Matrix};
use lorm_core::merge::{merge_a_fixed_b, merge_task_residuals, regmean_merge, weighted_mean, MergeInput};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn setup(seed: u64, d: usize, k: usize, n: usize) -> (Vec<Matrix>, Vec<GramStat>) {
    let mut rng = rng(seed, 1000);
    let xs = random_inputs(&mut rng, k, n, 1e4);
    let ws = (0..n).map(|_| Matrix::gaussian(d, k, 1.0, &mut rng)).collect();
    (ws, grams_of(&xs))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_sum_ignores_order(seed in 0u64..1000, n in 1usize..6, k in 1usize..8) {
        let (_, grams) = setup(seed, 2, k, n);
        let forward = GramStat::sum(grams.iter()).unwrap();
        let backward = GramStat::sum(grams.iter().rev()).unwrap();
        prop_assert!(forward.gram.rel_diff(&backward.gram) <= 1e-12);
        prop_assert_eq!(forward.samples, backward.samples);
    }

    #[test]
    fn regmean_ignores_contributor_order(seed in 0u64..1000, n in 2usize..6, d in 1usize..6, k in 1usize..6) {
        let (ws, grams) = setup(seed, d, k, n);
        let a = regmean_merge(&MergeInput::from_parts(&ws, &grams).unwrap(), 0.0).unwrap();
        let rw: Vec<Matrix> = ws.iter().rev().cloned().collect();
        let rg: Vec<GramStat> = grams.iter().rev().cloned().collect();
        let b = regmean_merge(&MergeInput::from_parts(&rw, &rg).unwrap(), 0.0).unwrap();
        prop_assert!(a.rel_diff(&b) <= 1e-9);
    }

    #[test]
    fn duplicate_contributor_equals_doubled_gram(seed in 0u64..1000, n in 1usize..5, d in 1usize..6, k in 1usize..6) {
        let (ws, grams) = setup(seed, d, k, n);
        let mut dup_w = ws.clone();
        dup_w.push(ws[0].clone());
        let mut dup_g = grams.clone();
        dup_g.push(grams[0].clone());
        let duplicated = regmean_merge(&MergeInput::from_parts(&dup_w, &dup_g).unwrap(), 0.0).unwrap();
        let mut weighted = grams.clone();
        weighted[0].gram = weighted[0].gram.scale(2.0);
        let doubled = regmean_merge(&MergeInput::from_parts(&ws, &weighted).unwrap(), 0.0).unwrap();
        prop_assert!(duplicated.rel_diff(&doubled) <= 1e-9);
    }

    #[test]
    fn merged_a_does_not_depend_on_b(seed in 0u64..1000, n in 1usize..5, r in 1usize..4, k in 1usize..7) {
        let mut rng = rng(seed, 2000);
        let xs = random_inputs(&mut rng, k, n, 1e4);
        let a_list: Vec<Matrix> = (0..n).map(|_| Matrix::gaussian(r, k, 1.0, &mut rng)).collect();
        let got = merge_a_fixed_b(&a_list, &grams_of(&xs), 0.0).unwrap();
        // any full-column-rank B yields the same least-squares A
        for d in [r, r + 3] {
            let b = Matrix::gaussian(d, r, 1.0, &mut rng);
            prop_assert!(rel_frob(&to_na(&got), &a_merge_oracle(&a_list, &b, &xs)) <= 1e-7);
        }
    }

    #[test]
    fn a_merge_with_shared_gram_is_the_mean(seed in 0u64..1000, n in 1usize..5, r in 1usize..4, k in 1usize..7) {
        let mut rng = rng(seed, 3000);
        let x = random_inputs(&mut rng, k, 1, 1e4).remove(0);
        let g = GramStat::from_inputs(&x);
        let a_list: Vec<Matrix> = (0..n).map(|_| Matrix::gaussian(r, k, 1.0, &mut rng)).collect();
        let got = merge_a_fixed_b(&a_list, &vec![g; n], 0.0).unwrap();
        let mean = weighted_mean(&a_list, &vec![1.0; n]).unwrap();
        prop_assert!(got.rel_diff(&mean) <= 1e-10);
    }

    #[test]
    fn equal_task_residuals_merge_to_themselves(seed in 0u64..1000, t in 1usize..5, d in 1usize..6, k in 1usize..6) {
        let (ws, grams) = setup(seed, d, k, t);
        let same = vec![ws[0].clone(); t];
        let got = merge_task_residuals(&same, &grams, 0.0).unwrap();
        prop_assert!(got.rel_diff(&ws[0]) <= 1e-10);
        let mean = weighted_mean(&same, &vec![1.0; t]).unwrap();
        prop_assert!(mean.rel_diff(&ws[0]) <= 1e-12);
    }

    #[test]
    fn partitions_cover_the_task(seed in 0u64..1000, n in 1usize..8, beta in 0.01f64..100.0, per_class in 8usize..40) {
        let classes = [3usize, 4, 5];
        let mut labels = Vec::new();
        for &c in &classes {
            labels.extend(std::iter::repeat_n(c, per_class));
        }
        let task = TaskSpec {
            task_id: 2,
            class_ids: classes.to_vec(),
            train_indices: (0..labels.len()).collect(),
            test_indices: vec![],
        };
        let parts = dirichlet_partition(&task, &labels, n, beta, seed).unwrap();
        prop_assert_eq!(parts.len(), n);
        let mut seen = BTreeSet::new();
        for p in &parts {
            prop_assert!(!p.indices.is_empty());
            prop_assert_eq!(p.task_id, 2);
            for &i in &p.indices {
                prop_assert!(seen.insert(i), "index {} assigned twice", i);
            }
        }
        prop_assert_eq!(seen, task.train_indices.iter().copied().collect::<BTreeSet<_>>());
    }

    #[test]
    fn faa_is_a_bounded_symmetric_mean(acc in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
        let v = faa(&acc).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let mut rev = acc.clone();
        rev.reverse();
        prop_assert!((faa(&rev).unwrap() - v).abs() <= 1e-15);
    }
}

#[test]
fn faa_examples() {
    assert_eq!(faa(&[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(faa(&[0.5, 1.0]).unwrap(), 0.75);
    assert!((faa(&[0.9, 0.8, 0.7]).unwrap() - 0.8).abs() < 1e-15);
    assert!(faa(&[]).is_err());
}
