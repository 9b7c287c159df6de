//! Central finite-difference checks of every differentiable component.
//!
//! Each check builds a small random instance, reduces its output to a
//! scalar through a fixed random probe, and compares the tape gradient of
//! every input with `(f(θ+h) − f(θ−h)) / 2h`. The error reported for one
//! tensor is `‖g_tape − g_fd‖ / (‖g_tape‖ + ‖g_fd‖)`; a check's score is the
//! worst tensor over all seeds. Structurally zero gradients are skipped, see
//! [`ZERO_ANALYTIC`].

use crate::encoder::{Batch, Encoder, EncoderConfig, PackedInput};
use crate::error::Result;
use crate::model::{regularized_loss, Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::pooling::{AttentionPoolHead, ClassifierHead, LstmPoolHead, PoolingKind};
use crate::rng::{seeded, Rng64};
use crate::tape::{AttentionDims, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;
/// A tensor whose tape gradient norm is below this, and whose difference
/// quotient is within rounding noise, has a structurally zero gradient
/// (for example a key bias under softmax shift invariance).
pub const ZERO_ANALYTIC: f64 = 1e-9;
pub const ZERO_NUMERIC: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Worst per-tensor relative error between tape and finite-difference
/// gradients of the scalar `f` with respect to every parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let analytic = bound.grads(&mut grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok(tape.value(out).item())
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (id, grad) in store.ids().zip(analytic) {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let analytic = grad.map_or_else(|| vec![0.0; n], Tensor::into_data);
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nn) = (norm(&analytic), norm(&numeric));
        if na < ZERO_ANALYTIC && nn < ZERO_NUMERIC {
            continue;
        }
        let denom = na + nn;
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    Ok(worst)
}

/// Reduces `out` to a scalar by a dot product with fixed weights.
fn probe(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.mul_const(out, weights.to_vec())?;
    Ok(tape.sum(w))
}

fn randn(shape: &[usize], rng: &mut Rng64) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn probe_weights(n: usize, rng: &mut Rng64) -> Vec<f64> {
    randn(&[n], rng).into_data()
}

fn matmul_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let a = s.add("a", randn(&[3, 4], &mut rng), true);
    let b = s.add("b", randn(&[4, 2], &mut rng), true);
    let w = probe_weights(6, &mut rng);
    check_gradients(&s, |t, p| {
        let c = t.matmul(p[a], p[b])?;
        probe(t, c, &w)
    })
}

fn softmax_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(&[3, 4, 2], &mut rng), true);
    let w = probe_weights(24, &mut rng);
    check_gradients(&s, |t, p| {
        let a = t.softmax(p[x], 1)?;
        let b = t.softmax(p[x], 2)?;
        let c = t.add(a, b)?;
        probe(t, c, &w)
    })
}

fn cross_entropy_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let x = s.add("logits", randn(&[4, 3], &mut rng), true);
    let labels = [0, 2, 1, 2];
    check_gradients(&s, |t, p| {
        let probs = t.softmax(p[x], 1)?;
        t.cross_entropy(probs, &labels)
    })
}

fn elementwise_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(&[3, 4], &mut rng), true);
    let y = s.add("y", randn(&[3, 4], &mut rng), true);
    let bias = s.add("bias", randn(&[4], &mut rng), true);
    let rows = s.add("rows", randn(&[3, 1], &mut rng), true);
    let w = probe_weights(12, &mut rng);
    check_gradients(&s, |t, p| {
        let a = t.sigmoid(p[x]);
        let b = t.tanh(p[y]);
        let c = t.gelu(p[x]);
        let ab = t.mul(a, b)?;
        let abc = t.add(ab, c)?;
        let abc = t.add_bias(abc, p[bias])?;
        let scaled = t.scale_rows(abc, p[rows])?;
        let left = t.slice_cols(scaled, 0, 1)?;
        let right = t.slice_cols(scaled, 1, 4)?;
        let swapped = t.concat_cols(&[right, left])?;
        let flat = t.reshape(swapped, &[12])?;
        let flat = t.reshape(flat, &[3, 4])?;
        let sq = t.sum_squares(p[y]);
        let sq = t.scale(sq, 0.1);
        let out = probe(t, flat, &w)?;
        t.add(out, sq)
    })
}

fn layer_norm_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(&[4, 6], &mut rng), true);
    let g = s.add("gamma", randn(&[6], &mut rng), true);
    let b = s.add("beta", randn(&[6], &mut rng), true);
    let w = probe_weights(24, &mut rng);
    check_gradients(&s, |t, p| {
        let y = t.layer_norm(p[x], p[g], p[b], 1e-12)?;
        probe(t, y, &w)
    })
}

fn attention_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let q = s.add("q", randn(&[6, 4], &mut rng), true);
    let k = s.add("k", randn(&[6, 4], &mut rng), true);
    let v = s.add("v", randn(&[6, 4], &mut rng), true);
    let w = probe_weights(24, &mut rng);
    let mask = [true, true, false, true, true, true];
    let dims = AttentionDims {
        batch: 2,
        seq: 3,
        heads: 2,
    };
    check_gradients(&s, |t, p| {
        let o = t.attention(p[q], p[k], p[v], &mask, dims)?;
        probe(t, o, &w)
    })
}

fn embedding_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let table = s.add("table", randn(&[5, 3], &mut rng), true);
    let w = probe_weights(12, &mut rng);
    check_gradients(&s, |t, p| {
        let e = t.gather_rows(p[table], &[4, 0, 4, 2])?;
        probe(t, e, &w)
    })
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 12,
        vocab: 10,
        max_len: 8,
        dropout: 0.1,
    }
}

fn tiny_inputs() -> Vec<PackedInput> {
    vec![
        PackedInput {
            token_ids: vec![2, 5, 7, 3, 9, 3, 0, 0],
            segment_ids: vec![0, 0, 0, 0, 1, 1, 0, 0],
            mask: vec![true, true, true, true, true, true, false, false],
        },
        PackedInput {
            token_ids: vec![2, 4, 3, 6, 3, 0, 0, 0],
            segment_ids: vec![0, 0, 0, 1, 1, 0, 0, 0],
            mask: vec![true, true, true, true, true, false, false, false],
        },
    ]
}

/// Re-draws every parameter from `N(0, std²)`, keeping layer-norm gains near 1.
fn randomize(store: &mut ParamStore, std: f64, rng: &mut Rng64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let shape = store.get(id).shape().to_vec();
        let mut t = Tensor::randn(&shape, std, rng);
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        store.set(id, t).expect("same shape");
    }
}

fn encoder_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let enc = Encoder::new(&mut s, tiny_encoder_config(), &mut rng)?;
    randomize(&mut s, 0.5, &mut rng);
    let inputs = tiny_inputs();
    let refs: Vec<_> = inputs.iter().collect();
    let batch = Batch::new(&refs, enc.config())?;
    let w_hidden = probe_weights(batch.size * batch.seq * 8, &mut rng);
    let w_cls = probe_weights(batch.size * 8, &mut rng);
    let dropout_seed = seed ^ 0xD0;
    check_gradients(&s, |t, p| {
        let mut drop = seeded(dropout_seed);
        let out = enc.forward(t, p, &batch, Some(&mut drop))?;
        let a = probe(t, out.hidden, &w_hidden)?;
        let b = probe(t, out.cls[0], &w_cls)?;
        t.add(a, b)
    })
}

fn trace_params(
    s: &mut ParamStore,
    layers: usize,
    rows: usize,
    h: usize,
    rng: &mut Rng64,
) -> Vec<crate::params::ParamId> {
    (0..layers)
        .map(|i| s.add(format!("trace.{i}"), randn(&[rows, h], rng), true))
        .collect()
}

fn lstm_pool_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let head = LstmPoolHead::new(&mut s, 5, &mut rng);
    randomize(&mut s, 0.5, &mut rng);
    let trace = trace_params(&mut s, 4, 2, 5, &mut rng);
    let w = probe_weights(10, &mut rng);
    check_gradients(&s, |t, p| {
        let xs: Vec<Var> = trace.iter().map(|&id| p[id]).collect();
        let o = head.forward(t, p, &xs)?;
        probe(t, o, &w)
    })
}

fn attention_pool_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let head = AttentionPoolHead::new(&mut s, 5, &mut rng);
    randomize(&mut s, 0.5, &mut rng);
    let trace = trace_params(&mut s, 4, 2, 5, &mut rng);
    let w = probe_weights(10, &mut rng);
    check_gradients(&s, |t, p| {
        let xs: Vec<Var> = trace.iter().map(|&id| p[id]).collect();
        let o = head.forward(t, p, &xs)?;
        probe(t, o, &w)
    })
}

fn classifier_case(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    let head = ClassifierHead::new(&mut s, 6, 3, &mut rng);
    randomize(&mut s, 0.5, &mut rng);
    let o = s.add("o", randn(&[4, 6], &mut rng), true);
    let labels = [2, 0, 1, 1];
    let dropout_seed = seed ^ 0xC1;
    check_gradients(&s, |t, p| {
        let mut drop = seeded(dropout_seed);
        let y = head.forward(t, p, p[o], 0.1, Some(&mut drop))?;
        t.cross_entropy(y, &labels)
    })
}

fn model_case(seed: u64, pooling: PoolingKind) -> Result<f64> {
    let mut rng = seeded(seed);
    let cfg = ModelConfig {
        encoder: tiny_encoder_config(),
        pooling,
        classes: 3,
    };
    let mut model = Model::new(cfg, &mut rng)?;
    randomize(&mut model.store, 0.5, &mut rng);
    let inputs = tiny_inputs();
    let refs: Vec<_> = inputs.iter().collect();
    let batch = model.batch(&refs)?;
    let labels = [1, 2];
    let dropout_seed = seed ^ 0x5EED;
    let m = &model;
    check_gradients(&model.store, |t, p| {
        let mut drop = seeded(dropout_seed);
        let enc = m.encoder.forward(t, p, &batch, Some(&mut drop))?;
        let pooled = m.pooling.forward(t, p, &enc.cls)?;
        let probs = m.classifier.forward(t, p, pooled, 0.1, Some(&mut drop))?;
        regularized_loss(t, probs, &labels, p, &m.store, 0.01)
    })
}

type Case = (&'static str, fn(u64) -> Result<f64>);

const CASES: &[Case] = &[
    ("matmul", matmul_case),
    ("softmax", softmax_case),
    ("cross_entropy", cross_entropy_case),
    ("elementwise", elementwise_case),
    ("layer_norm", layer_norm_case),
    ("attention", attention_case),
    ("embedding", embedding_case),
    ("encoder", encoder_case),
    ("lstm_pool", lstm_pool_case),
    ("attention_pool", attention_pool_case),
    ("classifier", classifier_case),
    ("regularized_loss/last", |s| {
        model_case(s, PoolingKind::Last)
    }),
    ("regularized_loss/lstm", |s| {
        model_case(s, PoolingKind::Lstm)
    }),
    ("regularized_loss/attention", |s| {
        model_case(s, PoolingKind::Attention)
    }),
];

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Runs every check over `seeds` seeds.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    use rayon::prelude::*;
    CASES
        .par_iter()
        .map(|(name, case)| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                worst = worst.max(case(seed)?);
            }
            Ok(CheckResult { name, seeds, worst })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x * detach(x): the tape sees a gradient of x, the true one is 2x.
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![1.0, -2.0, 0.5]), true);
        let err = check_gradients(&s, |t, p| {
            let c = t.constant(t.value(p[x]).clone());
            let y = t.mul(p[x], c)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err > 0.3, "{err}");
        let ok = check_gradients(&s, |t, p| Ok(t.sum_squares(p[x]))).unwrap();
        assert!(ok < 1e-9);
    }

    #[test]
    fn single_seed_smoke() {
        for (name, case) in CASES {
            let err = case(0).unwrap();
            assert!(err < TOLERANCE, "{name}: {err}");
        }
    }
}
