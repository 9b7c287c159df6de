use clspool::data::pack_ids;
use clspool::encoder::{EncoderConfig, PackedInput};
use clspool::model::regularized_loss;
use clspool::optim::Adam;
use clspool::rng::{seeded, Rng64};
use clspool::tape::Tape;
use clspool::train::{train_step, Encoded};
use clspool::{Model, ModelConfig, PoolingKind};
use rand::Rng;

const VOCAB: usize = 20;

fn desk(pooling: PoolingKind, dropout: f64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dropout,
            ..EncoderConfig::desk(VOCAB)
        },
        pooling,
        classes: 3,
    }
}

fn random_input(rng: &mut Rng64, max_len: usize) -> PackedInput {
    let la = rng.random_range(1..8);
    let lb = rng.random_range(1..4);
    let a: Vec<usize> = (0..la).map(|_| rng.random_range(4..VOCAB)).collect();
    let b: Vec<usize> = (0..lb).map(|_| rng.random_range(4..VOCAB)).collect();
    pack_ids(&a, &b, max_len).unwrap()
}

#[test]
fn gradient_reaches_every_encoder_layer() {
    for pooling in PoolingKind::ALL {
        let mut rng = seeded(3);
        let model = Model::new(desk(pooling, 0.1), &mut rng).unwrap();
        let inputs: Vec<_> = (0..4).map(|_| random_input(&mut rng, 16)).collect();
        let refs: Vec<_> = inputs.iter().collect();
        let batch = model.batch(&refs).unwrap();
        let mut tape = Tape::new();
        let mut drop = seeded(4);
        let fwd = model.forward(&mut tape, &batch, Some(&mut drop)).unwrap();
        let loss = regularized_loss(
            &mut tape,
            fwd.probs,
            &[0, 1, 2, 1],
            &fwd.bound,
            &model.store,
            1e-5,
        )
        .unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let grads = fwd.bound.grads(&mut grads);
        for layer in 0..model.config.encoder.layers {
            let prefix = format!("encoder.layer.{layer}.");
            let touched = model
                .store
                .iter()
                .zip(&grads)
                .filter(|((_, p), _)| p.name.starts_with(&prefix))
                .any(|(_, g)| {
                    g.as_ref()
                        .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
                });
            assert!(touched, "{pooling}: no gradient reaches layer {layer}");
        }
    }
}

#[test]
fn masked_positions_do_not_leak() {
    let mut rng = seeded(5);
    let model = Model::new(desk(PoolingKind::Attention, 0.1), &mut rng).unwrap();
    let input = random_input(&mut rng, 24);
    let active = input.active_len();
    assert!(active < 24);
    let mut other = input.clone();
    for i in active..24 {
        other.token_ids[i] = rng.random_range(4..VOCAB);
        other.segment_ids[i] = 1;
    }
    let a = model.predict_proba(std::slice::from_ref(&input)).unwrap();
    let b = model.predict_proba(&[other.clone()]).unwrap();
    assert_eq!(a, b);
    let (ha, ta) = model.encoder.encode(&model.store, &input).unwrap();
    let (hb, tb) = model.encoder.encode(&model.store, &other).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(&ha.data()[..active * 32], &hb.data()[..active * 32]);
}

#[test]
fn eval_results_do_not_depend_on_batching() {
    for pooling in PoolingKind::ALL {
        let mut rng = seeded(6);
        let model = Model::new(desk(pooling, 0.1), &mut rng).unwrap();
        let inputs: Vec<_> = (0..9).map(|_| random_input(&mut rng, 32)).collect();
        let together = model.predict_proba(&inputs).unwrap();
        for (i, inp) in inputs.iter().enumerate() {
            let alone = model.predict_proba(std::slice::from_ref(inp)).unwrap();
            for (x, y) in alone[0].iter().zip(&together[i]) {
                assert!((x - y).abs() <= 1e-6, "{pooling}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn early_loss_is_non_increasing_on_a_fixed_batch() {
    // Dropout off so the five losses differ only through the parameter updates.
    let mut good = 0;
    for seed in 0..20 {
        let mut rng = seeded(1000 + seed);
        let mut model = Model::new(desk(PoolingKind::Lstm, 0.0), &mut rng).unwrap();
        let data: Vec<Encoded> = (0..16)
            .map(|i| Encoded {
                input: random_input(&mut rng, 16),
                label: i % 3,
            })
            .collect();
        let batch: Vec<&Encoded> = data.iter().collect();
        let mut adam = Adam::new(&model.store, 1e-3);
        let mut drop = seeded(seed);
        let losses: Vec<f64> = (0..6)
            .map(|_| train_step(&mut model, &mut adam, &batch, 1e-5, &mut drop).unwrap())
            .collect();
        if losses.windows(2).take(5).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 18, "monotone on {good}/20 seeds");
}
