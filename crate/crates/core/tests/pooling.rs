use clspool::encoder::ClsTrace;
use clspool::params::ParamStore;
use clspool::pooling::{
    attention_pool, classify, last_cls_pool, lstm_pool, AttentionPoolHead, ClassifierHead,
    LstmPoolHead,
};
use clspool::rng::seeded;
use clspool::Tensor;
use proptest::prelude::*;

fn trace_strategy() -> impl Strategy<Value = ClsTrace> {
    (1usize..=8, 1usize..=16).prop_flat_map(|(l, h)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, h), l).prop_map(ClsTrace::new)
    })
}

proptest! {
    #[test]
    fn attention_output_stays_in_the_convex_hull(trace in trace_strategy(), seed in 0u64..1000) {
        let h = trace.hidden();
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let head = AttentionPoolHead::new(&mut store, h, &mut rng);
        store.set(head.w_h, Tensor::identity(h)).unwrap();
        store.set(head.query, Tensor::randn(&[h], 1.0, &mut rng)).unwrap();
        let (o, alpha) = attention_pool(&trace, &store, &head).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        for (j, &v) in o.iter().enumerate() {
            let lo = trace.vectors.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
            let hi = trace.vectors.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn classifier_output_is_a_distribution(o in prop::collection::vec(-10.0f64..10.0, 6), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let head = ClassifierHead::new(&mut store, 6, 4, &mut rng);
        store.set(head.weight, Tensor::randn(&[6, 4], 1.0, &mut rng)).unwrap();
        let y = classify(&o, &store, &head).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn single_layer_attention_with_identity_is_last_layer() {
    let mut rng = seeded(1);
    let trace = ClsTrace::new(vec![vec![0.3, -1.2, 2.0]]);
    let mut store = ParamStore::new();
    let head = AttentionPoolHead::new(&mut store, 3, &mut rng);
    store.set(head.w_h, Tensor::identity(3)).unwrap();
    let (o, alpha) = attention_pool(&trace, &store, &head).unwrap();
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(o, last_cls_pool(&trace).unwrap());
}

#[test]
fn zero_query_gives_uniform_weights() {
    let mut rng = seeded(2);
    let trace = ClsTrace::new(vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![-1.0, 4.0]]);
    let mut store = ParamStore::new();
    let head = AttentionPoolHead::new(&mut store, 2, &mut rng);
    store.set(head.w_h, Tensor::identity(2)).unwrap();
    store.set(head.query, Tensor::zeros(&[2])).unwrap();
    let (o, alpha) = attention_pool(&trace, &store, &head).unwrap();
    assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    assert!((o[0] - 1.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
}

#[test]
fn zero_lstm_is_a_fixed_point() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let head = LstmPoolHead::new(&mut store, 4, &mut rng);
    for id in [head.w_input, head.w_recurrent, head.bias] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let trace = ClsTrace::new(vec![vec![1.0, -2.0, 3.0, 0.5]; 3]);
    assert_eq!(lstm_pool(&trace, &store, &head).unwrap(), vec![0.0; 4]);
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let head = LstmPoolHead::new(&mut store, 5, &mut rng);
    let b = store.get(head.bias).data();
    assert!(b[..5].iter().all(|&v| v == 0.0));
    assert!(b[5..10].iter().all(|&v| v == 1.0));
    assert!(b[10..].iter().all(|&v| v == 0.0));
}

#[test]
fn empty_trace_is_rejected() {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let att = AttentionPoolHead::new(&mut store, 2, &mut rng);
    let lstm = LstmPoolHead::new(&mut store, 2, &mut rng);
    let empty = ClsTrace::new(Vec::new());
    assert!(last_cls_pool(&empty).is_err());
    assert!(attention_pool(&empty, &store, &att).is_err());
    assert!(lstm_pool(&empty, &store, &lstm).is_err());
}

#[test]
fn classifier_bias_example() {
    let mut rng = seeded(6);
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, 2, 3, &mut rng);
    store.set(head.weight, Tensor::zeros(&[2, 3])).unwrap();
    let c = 0.7;
    store
        .set(
            head.bias,
            Tensor::vector(vec![1f64.ln() - c, 2f64.ln() - c, 3f64.ln() - c]),
        )
        .unwrap();
    let y = classify(&[5.0, -1.0], &store, &head).unwrap();
    for (p, e) in y.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((p - e).abs() < 1e-12);
    }
}
