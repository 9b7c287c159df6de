//! Pooling heads over the per-layer `[CLS]` trace, and the softmax classifier.
//!
//! Three interchangeable heads map the trace `h¹ … hᴸ` to one vector `o`:
//!
//! * `last`: `o = hᴸ`, the conventional fine-tuning head.
//! * `lstm`: a unidirectional LSTM reads `h¹ … hᴸ` in order from a zero
//!   state; `o` is its final hidden state.
//! * `attention`: scores `sᵢ = q·hᵢ`, weights `α = softmax(s)` over layers,
//!   `o = W_hᵀ Σᵢ αᵢ hᵢ`. No score scaling, no bias.
//!
//! The classifier then computes `y = softmax(W_oᵀ dropout(o) + b_o)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{dropout, ClsTrace, INIT_STD};
use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingKind {
    Last,
    Lstm,
    Attention,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] =
        [PoolingKind::Last, PoolingKind::Lstm, PoolingKind::Attention];

    pub fn token(self) -> &'static str {
        match self {
            PoolingKind::Last => "last",
            PoolingKind::Lstm => "lstm",
            PoolingKind::Attention => "attention",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(PoolingKind::Last),
            "lstm" => Ok(PoolingKind::Lstm),
            "attention" => Ok(PoolingKind::Attention),
            other => Err(Error::Config(format!(
                "unknown pooling '{other}', expected one of: last, lstm, attention"
            ))),
        }
    }
}

/// Single-layer LSTM with input and hidden size `H`. Gate blocks in the
/// stacked weights are ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmPoolHead {
    pub w_input: ParamId,
    pub w_recurrent: ParamId,
    pub bias: ParamId,
    hidden: usize,
}

impl LstmPoolHead {
    pub fn new(store: &mut ParamStore, hidden: usize, rng: &mut Rng64) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let w_input = uniform(&[hidden, 4 * hidden]);
        let w_recurrent = uniform(&[hidden, 4 * hidden]);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_input: store.add("pooling.lstm.w_input", w_input, true),
            w_recurrent: store.add("pooling.lstm.w_recurrent", w_recurrent, true),
            bias: store.add("pooling.lstm.bias", Tensor::vector(bias), false),
            hidden,
        }
    }

    /// Runs the cell over `trace` (each `batch × H`) and returns the last hidden state.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, trace: &[Var]) -> Result<Var> {
        let first = *trace.first().ok_or_else(|| contract("empty [CLS] trace"))?;
        let (rows, _) = tape.value(first).dims2()?;
        let h = self.hidden;
        let mut hidden = tape.constant(Tensor::zeros(&[rows, h]));
        let mut cell = tape.constant(Tensor::zeros(&[rows, h]));
        for &x in trace {
            let gx = tape.matmul(x, p[self.w_input])?;
            let gh = tape.matmul(hidden, p[self.w_recurrent])?;
            let gates = tape.add(gx, gh)?;
            let gates = tape.add_bias(gates, p[self.bias])?;
            let i = tape.slice_cols(gates, 0, h)?;
            let f = tape.slice_cols(gates, h, 2 * h)?;
            let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
            let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
            let (i, f, g, o) = (
                tape.sigmoid(i),
                tape.sigmoid(f),
                tape.tanh(g),
                tape.sigmoid(o),
            );
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.tanh(cell);
            hidden = tape.mul(o, squashed)?;
        }
        Ok(hidden)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionPoolHead {
    pub w_h: ParamId,
    pub query: ParamId,
    hidden: usize,
}

impl AttentionPoolHead {
    pub fn new(store: &mut ParamStore, hidden: usize, rng: &mut Rng64) -> Self {
        Self {
            w_h: store.add(
                "pooling.attention.w_h",
                Tensor::randn(&[hidden, hidden], INIT_STD, rng),
                true,
            ),
            query: store.add(
                "pooling.attention.q",
                Tensor::randn(&[hidden], INIT_STD, rng),
                true,
            ),
            hidden,
        }
    }

    /// Layer weights `α` (`batch × L`) for a trace.
    pub fn weights(&self, tape: &mut Tape, p: &Bound, trace: &[Var]) -> Result<Var> {
        if trace.is_empty() {
            return Err(contract("empty [CLS] trace"));
        }
        let q = tape.reshape(p[self.query], &[self.hidden, 1])?;
        let scores = trace
            .iter()
            .map(|&h| tape.matmul(h, q))
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.concat_cols(&scores)?;
        tape.softmax(scores, 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, trace: &[Var]) -> Result<Var> {
        let alpha = self.weights(tape, p, trace)?;
        let mut pooled = None;
        for (i, &h) in trace.iter().enumerate() {
            let a = tape.slice_cols(alpha, i, i + 1)?;
            let term = tape.scale_rows(h, a)?;
            pooled = Some(match pooled {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let pooled = pooled.expect("nonempty trace");
        tape.matmul(pooled, p[self.w_h])
    }
}

#[derive(Debug, Clone)]
pub enum PoolingHead {
    Last,
    Lstm(LstmPoolHead),
    Attention(AttentionPoolHead),
}

impl PoolingHead {
    pub fn new(kind: PoolingKind, store: &mut ParamStore, hidden: usize, rng: &mut Rng64) -> Self {
        match kind {
            PoolingKind::Last => PoolingHead::Last,
            PoolingKind::Lstm => PoolingHead::Lstm(LstmPoolHead::new(store, hidden, rng)),
            PoolingKind::Attention => {
                PoolingHead::Attention(AttentionPoolHead::new(store, hidden, rng))
            }
        }
    }

    pub fn kind(&self) -> PoolingKind {
        match self {
            PoolingHead::Last => PoolingKind::Last,
            PoolingHead::Lstm(_) => PoolingKind::Lstm,
            PoolingHead::Attention(_) => PoolingKind::Attention,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, trace: &[Var]) -> Result<Var> {
        match self {
            PoolingHead::Last => trace
                .last()
                .copied()
                .ok_or_else(|| contract("empty [CLS] trace")),
            PoolingHead::Lstm(head) => head.forward(tape, p, trace),
            PoolingHead::Attention(head) => head.forward(tape, p, trace),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, hidden: usize, classes: usize, rng: &mut Rng64) -> Self {
        Self {
            weight: store.add(
                "classifier.weight",
                Tensor::randn(&[hidden, classes], INIT_STD, rng),
                true,
            ),
            bias: store.add("classifier.bias", Tensor::zeros(&[classes]), false),
        }
    }

    /// Class probabilities for pooled vectors `o` (`batch × H`). Dropout on
    /// `o` is applied only when `rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pooled: Var,
        rate: f64,
        rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let o = dropout(tape, pooled, rate, rng)?;
        let logits = tape.matmul(o, p[self.weight])?;
        let logits = tape.add_bias(logits, p[self.bias])?;
        tape.softmax(logits, 1)
    }
}

fn trace_leaves(tape: &mut Tape, trace: &ClsTrace) -> Result<Vec<Var>> {
    if trace.is_empty() {
        return Err(contract("empty [CLS] trace"));
    }
    let h = trace.hidden();
    trace
        .vectors
        .iter()
        .map(|v| {
            if v.len() != h {
                return Err(Error::Shape {
                    op: "cls_trace",
                    left: vec![h],
                    right: vec![v.len()],
                });
            }
            Ok(tape.constant(Tensor::new(vec![1, h], v.clone())?))
        })
        .collect()
}

/// `o = hᴸ` for a single trace.
pub fn last_cls_pool(trace: &ClsTrace) -> Result<Vec<f64>> {
    trace
        .vectors
        .last()
        .cloned()
        .ok_or_else(|| contract("empty [CLS] trace"))
}

/// LSTM pooling of a single trace with the head's current parameters.
pub fn lstm_pool(trace: &ClsTrace, store: &ParamStore, head: &LstmPoolHead) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xs = trace_leaves(&mut tape, trace)?;
    let o = head.forward(&mut tape, &p, &xs)?;
    Ok(tape.value(o).data().to_vec())
}

/// Attention pooling of a single trace. Returns `(o, α)`.
pub fn attention_pool(
    trace: &ClsTrace,
    store: &ParamStore,
    head: &AttentionPoolHead,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xs = trace_leaves(&mut tape, trace)?;
    let alpha = head.weights(&mut tape, &p, &xs)?;
    let o = head.forward(&mut tape, &p, &xs)?;
    Ok((
        tape.value(o).data().to_vec(),
        tape.value(alpha).data().to_vec(),
    ))
}

/// Eval-mode class distribution for one pooled vector.
pub fn classify(o: &[f64], store: &ParamStore, head: &ClassifierHead) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(vec![1, o.len()], o.to_vec())?);
    let y = head.forward(&mut tape, &p, x, 0.0, None)?;
    Ok(tape.value(y).data().to_vec())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn trace(vs: &[&[f64]]) -> ClsTrace {
        ClsTrace::new(vs.iter().map(|v| v.to_vec()).collect())
    }

    #[test]
    fn pooling_tokens_round_trip() {
        for k in PoolingKind::ALL {
            assert_eq!(k.token().parse::<PoolingKind>().unwrap(), k);
        }
        assert!("cnn".parse::<PoolingKind>().is_err());
        assert!("LSTM".parse::<PoolingKind>().is_err());
    }

    #[test]
    fn last_pool_takes_final_vector() {
        let t = trace(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(last_cls_pool(&t).unwrap(), vec![5.0, 6.0]);
        assert_eq!(last_cls_pool(&trace(&[&[7.0]])).unwrap(), vec![7.0]);
        assert!(last_cls_pool(&ClsTrace::new(vec![])).is_err());
    }

    #[test]
    fn zero_lstm_yields_zero_output() {
        let mut store = ParamStore::new();
        let head = LstmPoolHead::new(&mut store, 3, &mut seeded(1));
        for id in [head.w_input, head.w_recurrent, head.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let t = trace(&[&[1.0, -2.0, 0.5], &[3.0, 0.1, -0.4]]);
        assert!(lstm_pool(&t, &store, &head)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let head = LstmPoolHead::new(&mut store, 4, &mut seeded(1));
        let b = store.get(head.bias).data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_pool_worked_example() {
        let mut store = ParamStore::new();
        let head = AttentionPoolHead::new(&mut store, 2, &mut seeded(1));
        store.set(head.w_h, Tensor::identity(2)).unwrap();
        store
            .set(head.query, Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        let t = trace(&[&[0.0, 4.0], &[3f64.ln(), 0.0]]);
        let (o, alpha) = attention_pool(&t, &store, &head).unwrap();
        assert!((alpha[0] - 0.25).abs() < 1e-12 && (alpha[1] - 0.75).abs() < 1e-12);
        assert!((o[0] - 0.75 * 3f64.ln()).abs() < 1e-12);
        assert!((o[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_pool_zero_query_averages() {
        let mut store = ParamStore::new();
        let head = AttentionPoolHead::new(&mut store, 2, &mut seeded(1));
        store.set(head.w_h, Tensor::identity(2)).unwrap();
        store
            .set(head.query, Tensor::vector(vec![0.0, 0.0]))
            .unwrap();
        let t = trace(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let (o, alpha) = attention_pool(&t, &store, &head).unwrap();
        assert!(alpha.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_pool_singleton_matches_last_with_identity() {
        let mut store = ParamStore::new();
        let head = AttentionPoolHead::new(&mut store, 3, &mut seeded(4));
        store.set(head.w_h, Tensor::identity(3)).unwrap();
        let t = trace(&[&[0.3, -1.2, 2.0]]);
        let (o, alpha) = attention_pool(&t, &store, &head).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(o, last_cls_pool(&t).unwrap());
    }

    #[test]
    fn classifier_examples() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 2, 3, &mut seeded(1));
        store.set(head.weight, Tensor::zeros(&[2, 3])).unwrap();
        let y = classify(&[0.4, -1.0], &store, &head).unwrap();
        assert!(y.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let shift = 0.37;
        let b = vec![1f64.ln() - shift, 2f64.ln() - shift, 3f64.ln() - shift];
        store.set(head.bias, Tensor::vector(b)).unwrap();
        let y = classify(&[0.4, -1.0], &store, &head).unwrap();
        for (got, want) in y.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_outputs_distributions() {
        let mut rng = seeded(11);
        for _ in 0..100 {
            let mut store = ParamStore::new();
            let head = ClassifierHead::new(&mut store, 5, 3, &mut rng);
            store
                .set(head.weight, Tensor::randn(&[5, 3], 2.0, &mut rng))
                .unwrap();
            store
                .set(head.bias, Tensor::randn(&[3], 2.0, &mut rng))
                .unwrap();
            let o = Tensor::randn(&[5], 3.0, &mut rng);
            let y = classify(o.data(), &store, &head).unwrap();
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
