use clspool::data::PairExample;
use clspool::kfold::kfold_split;
use clspool::optim::{adam_update, Adam, Moments};
use clspool::params::ParamStore;
use clspool::train::{cross_validated_train, Experiment, TaskShape, TrainConfig};
use clspool::{PoolingKind, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn kfold_partition_laws(
        labels in prop::collection::vec(0usize..3, 2..200),
        k in 2usize..=10,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= labels.len());
        let folds = kfold_split(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0usize; labels.len()];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for c in 0..3 {
            let per: Vec<usize> = folds.iter().map(|f| f.test.iter().filter(|&&i| labels[i] == c).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(folds, kfold_split(&labels, k, seed).unwrap());
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(
        p in prop::collection::vec(-5.0f64..5.0, 1..20),
        steps in 1u64..10,
    ) {
        let mut param = p.clone();
        let mut state = Moments::zeros(p.len());
        let g = vec![0.0; p.len()];
        for t in 1..=steps {
            adam_update(&mut param, &g, &mut state, t, 1e-3).unwrap();
        }
        prop_assert_eq!(param, p);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]), true);
    let mut adam = Adam::new(&store, 0.01);
    let grad = Tensor::vector(vec![3.0, -0.25, 0.0]);
    adam.step(&mut store, &[Some(grad)]).unwrap();
    let w = store.get(id).data();
    assert!((w[0] - 0.99).abs() < 1e-9);
    assert!((w[1] + 1.99).abs() < 1e-9);
    assert_eq!(w[2], 0.5);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn kfold_rejects_bad_requests() {
    assert!(kfold_split(&[0, 1, 2], 1, 0).is_err());
    assert!(kfold_split(&[0, 1, 2], 4, 0).is_err());
}

#[test]
fn two_folds_on_a_separable_toy_set() {
    let words = [["awful", "bad"], ["okay", "fine"], ["great", "superb"]];
    let data: Vec<PairExample> = (0..60)
        .map(|i| {
            let label = i % 3;
            PairExample {
                text_a: format!("it was {}", words[label][i / 3 % 2]),
                text_b: "thing".into(),
                label,
            }
        })
        .collect();
    let mut train = TrainConfig::desk(TaskShape::Absa);
    train.folds = 2;
    train.epochs = 40;
    train.batch_size = 8;
    train.seed = 1;
    let exp = Experiment::desk(PoolingKind::Attention, train);
    let report = cross_validated_train(&data, &exp).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert!(
        report.mean.accuracy >= 0.9,
        "mean accuracy {}",
        report.mean.accuracy
    );
    let mut tested: Vec<usize> = report
        .folds
        .iter()
        .flat_map(|f| f.test_indices.clone())
        .collect();
    tested.sort_unstable();
    assert_eq!(tested, (0..60).collect::<Vec<_>>());
}

#[test]
fn nli_runs_keep_a_dev_slice() {
    let data: Vec<PairExample> = (0..30)
        .map(|i| PairExample {
            text_a: format!("w{}", i % 3),
            text_b: "x".into(),
            label: i % 3,
        })
        .collect();
    let mut train = TrainConfig::desk(TaskShape::Nli);
    train.folds = 3;
    train.epochs = 2;
    let exp = Experiment::desk(PoolingKind::Lstm, train);
    let report = cross_validated_train(&data, &exp).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert!(report.stddev.accuracy >= 0.0);
}
