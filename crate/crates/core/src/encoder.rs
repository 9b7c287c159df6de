//! A scaled-down BERT-style encoder that exposes the `[CLS]` hidden state of
//! every transformer layer.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::{AttentionDims, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// CPU-sized defaults: 4 layers, hidden 32, 4 heads, feed-forward 64.
    pub fn desk(vocab: usize) -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 4,
            ffn: 64,
            vocab,
            max_len: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must fit [CLS] and two [SEP]".into()));
        }
        if self.vocab == 0 || self.ffn == 0 {
            return Err(Error::Config("vocab and ffn sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One packed sentence pair: `[CLS] a [SEP] b [SEP]` plus padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of positions up to and including the last attended one.
    pub fn active_len(&self) -> usize {
        self.mask.iter().rposition(|&m| m).map_or(0, |i| i + 1)
    }
}

/// Several packed inputs laid out as one `(batch·seq)` row block.
///
/// Sequences are cut to the longest attended prefix in the batch; the
/// trimmed tail is padding and never attended, so results do not depend on
/// batch composition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub size: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(inputs: &[&PackedInput], config: &EncoderConfig) -> Result<Self> {
        if inputs.is_empty() {
            return Err(contract("empty batch"));
        }
        for inp in inputs {
            if inp.len() > config.max_len {
                return Err(Error::Length {
                    len: inp.len(),
                    max: config.max_len,
                });
            }
            if inp.segment_ids.len() != inp.len() || inp.mask.len() != inp.len() {
                return Err(contract("packed input fields differ in length"));
            }
            for &t in &inp.token_ids {
                if t >= config.vocab {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: t,
                        bound: config.vocab,
                    });
                }
            }
            for &s in &inp.segment_ids {
                if s > 1 {
                    return Err(Error::Index {
                        what: "segment",
                        index: s,
                        bound: 2,
                    });
                }
            }
        }
        let seq = inputs
            .iter()
            .map(|i| i.active_len())
            .max()
            .unwrap_or(0)
            .max(1);
        let size = inputs.len();
        let mut b = Batch {
            token_ids: Vec::with_capacity(size * seq),
            segment_ids: Vec::with_capacity(size * seq),
            positions: Vec::with_capacity(size * seq),
            mask: Vec::with_capacity(size * seq),
            size,
            seq,
        };
        for inp in inputs {
            for p in 0..seq {
                b.token_ids.push(inp.token_ids.get(p).copied().unwrap_or(0));
                b.segment_ids
                    .push(inp.segment_ids.get(p).copied().unwrap_or(0));
                b.mask.push(inp.mask.get(p).copied().unwrap_or(false));
                b.positions.push(p);
            }
        }
        Ok(b)
    }

    /// Row index of each sequence's first (`[CLS]`) position.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size).map(|b| b * self.seq).collect()
    }
}

/// Applies inverted dropout when an RNG is supplied; identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut Rng64>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = (0..tape.value(x).numel())
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng64,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[fan_in, fan_out], INIT_STD, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_bias(y, p[self.bias])
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, hidden: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[hidden]), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[hidden]), false),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Outputs of one layer application.
struct LayerOut {
    hidden: Var,
    attention: Var,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, idx: usize, cfg: &EncoderConfig, rng: &mut Rng64) -> Self {
        let n = |s: &str| format!("encoder.layer.{idx}.{s}");
        let h = cfg.hidden;
        Self {
            query: Linear::new(store, &n("attention.query"), h, h, rng),
            key: Linear::new(store, &n("attention.key"), h, h, rng),
            value: Linear::new(store, &n("attention.value"), h, h, rng),
            attn_out: Linear::new(store, &n("attention.output"), h, h, rng),
            attn_norm: LayerNorm::new(store, &n("attention.norm"), h),
            ffn_in: Linear::new(store, &n("ffn.intermediate"), h, cfg.ffn, rng),
            ffn_out: Linear::new(store, &n("ffn.output"), cfg.ffn, h, rng),
            ffn_norm: LayerNorm::new(store, &n("ffn.norm"), h),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        batch: &Batch,
        cfg: &EncoderConfig,
        mut rng: Option<&mut Rng64>,
    ) -> Result<LayerOut> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let dims = AttentionDims {
            batch: batch.size,
            seq: batch.seq,
            heads: cfg.heads,
        };
        let attention = tape.attention(q, k, v, &batch.mask, dims)?;
        let a = self.attn_out.forward(tape, p, attention)?;
        let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut())?;
        let a = tape.add(a, x)?;
        let a = self.attn_norm.forward(tape, p, a)?;

        let f = self.ffn_in.forward(tape, p, a)?;
        let f = tape.gelu(f);
        let f = self.ffn_out.forward(tape, p, f)?;
        let f = dropout(tape, f, cfg.dropout, rng)?;
        let f = tape.add(f, a)?;
        let hidden = self.ffn_norm.forward(tape, p, f)?;
        Ok(LayerOut { hidden, attention })
    }
}

/// The tape handles produced by one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final-layer hidden states, `(batch·seq) × hidden`.
    pub hidden: Var,
    /// `[CLS]` rows (`batch × hidden`) of layers 1..=L, embedding-adjacent first.
    pub cls: Vec<Var>,
    /// Attention nodes per layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
    pub embedding: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    token_emb: ParamId,
    segment_emb: ParamId,
    position_emb: ParamId,
    emb_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// Ordered per-layer `[CLS]` vectors for one example, layer 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsTrace {
    pub vectors: Vec<Vec<f64>>,
}

impl ClsTrace {
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.vectors.iter().rev().cloned().collect())
    }
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let token_emb = store.add(
            "embeddings.token",
            Tensor::randn(&[config.vocab, h], INIT_STD, rng),
            true,
        );
        let segment_emb = store.add(
            "embeddings.segment",
            Tensor::randn(&[2, h], INIT_STD, rng),
            true,
        );
        let position_emb = store.add(
            "embeddings.position",
            Tensor::randn(&[config.max_len, h], INIT_STD, rng),
            true,
        );
        let emb_norm = LayerNorm::new(store, "embeddings.norm", h);
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(store, i, &config, rng))
            .collect();
        Ok(Self {
            config,
            token_emb,
            segment_emb,
            position_emb,
            emb_norm,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Token + segment + position embeddings, layer-normed, then dropout.
    pub fn embed_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let tok = tape.gather_rows(p[self.token_emb], &batch.token_ids)?;
        let seg = tape.gather_rows(p[self.segment_emb], &batch.segment_ids)?;
        let pos = tape.gather_rows(p[self.position_emb], &batch.positions)?;
        let x = tape.add(tok, seg)?;
        let x = tape.add(x, pos)?;
        let x = self.emb_norm.forward(tape, p, x)?;
        dropout(tape, x, self.config.dropout, rng)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        mut rng: Option<&mut Rng64>,
    ) -> Result<EncoderOutput> {
        let embedding = self.embed_batch(tape, p, batch, rng.as_deref_mut())?;
        let cls_rows = batch.cls_rows();
        let mut x = embedding;
        let mut cls = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(tape, p, x, batch, &self.config, rng.as_deref_mut())?;
            x = out.hidden;
            attention.push(out.attention);
            cls.push(tape.gather_rows(x, &cls_rows)?);
        }
        Ok(EncoderOutput {
            hidden: x,
            cls,
            attention,
            embedding,
        })
    }

    /// Eval-mode embedding of a single input, `S × H` over its full length.
    pub fn embed(&self, store: &ParamStore, input: &PackedInput) -> Result<Tensor> {
        let batch = self.full_length_batch(input)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = self.embed_batch(&mut tape, &p, &batch, None)?;
        Ok(tape.value(x).clone())
    }

    /// Eval-mode application of layer `layer` (0-based) to hidden states `x`.
    /// Returns the new hidden states and the attention probabilities
    /// `[head][query][key]`.
    pub fn self_attention_block(
        &self,
        store: &ParamStore,
        layer: usize,
        x: &Tensor,
        mask: &[bool],
    ) -> Result<(Tensor, Vec<f64>)> {
        let block = self.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            bound: self.layers.len(),
        })?;
        let (s, h) = x.dims2()?;
        if h != self.config.hidden || mask.len() != s {
            return Err(Error::Shape {
                op: "self_attention_block",
                left: x.shape().to_vec(),
                right: vec![mask.len(), self.config.hidden],
            });
        }
        let batch = Batch {
            token_ids: vec![0; s],
            segment_ids: vec![0; s],
            positions: (0..s).collect(),
            mask: mask.to_vec(),
            size: 1,
            seq: s,
        };
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = block.forward(&mut tape, &p, xv, &batch, &self.config, None)?;
        let probs = tape
            .attention_probs(out.attention)
            .expect("attention node")
            .to_vec();
        Ok((tape.value(out.hidden).clone(), probs))
    }

    /// Eval-mode forward of one input over its full length. Returns the final
    /// hidden states (`S × H`) and the `[CLS]` trace.
    pub fn encode(&self, store: &ParamStore, input: &PackedInput) -> Result<(Tensor, ClsTrace)> {
        let batch = self.full_length_batch(input)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, &batch, None)?;
        let trace = ClsTrace::new(
            out.cls
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect(),
        );
        Ok((tape.value(out.hidden).clone(), trace))
    }

    fn full_length_batch(&self, input: &PackedInput) -> Result<Batch> {
        let mut batch = Batch::new(&[input], &self.config)?;
        if batch.seq < input.len() {
            // keep padded positions so callers see an S × H result
            batch = Batch {
                token_ids: input.token_ids.clone(),
                segment_ids: input.segment_ids.clone(),
                positions: (0..input.len()).collect(),
                mask: input.mask.clone(),
                size: 1,
                seq: input.len(),
            };
        }
        Ok(batch)
    }
}
