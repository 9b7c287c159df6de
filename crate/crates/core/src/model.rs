//! Encoder, pooling head and classifier wired into one trainable model.

use crate::encoder::{Batch, ClsTrace, Encoder, EncoderConfig, PackedInput};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pooling::{ClassifierHead, PoolingHead, PoolingKind};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};

/// Examples per eval-mode forward when no batch size is given.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingKind,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pooling: PoolingHead,
    pub classifier: ClassifierHead,
}

/// Tape handles of one model forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub bound: Bound,
    pub cls: Vec<Var>,
    pub pooled: Var,
    pub probs: Var,
}

impl Model {
    /// Fresh model. Parameters are created in a fixed order from `rng`.
    pub fn new(config: ModelConfig, rng: &mut Rng64) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder.clone(), rng)?;
        let h = config.encoder.hidden;
        let pooling = PoolingHead::new(config.pooling, &mut store, h, rng);
        let classifier = ClassifierHead::new(&mut store, h, config.classes, rng);
        Ok(Self {
            config,
            store,
            encoder,
            pooling,
            classifier,
        })
    }

    /// Records a forward pass. Dropout is active iff `rng` is `Some`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        rng: Option<&mut Rng64>,
    ) -> Result<Forward> {
        let bound = if rng.is_some() {
            self.store.bind(tape)
        } else {
            self.store.bind_frozen(tape)
        };
        self.forward_bound(tape, bound, batch, rng)
    }

    /// Like [`forward`](Self::forward) but always records gradients, with
    /// dropout only when `rng` is given.
    pub fn forward_trainable(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        rng: Option<&mut Rng64>,
    ) -> Result<Forward> {
        let bound = self.store.bind(tape);
        self.forward_bound(tape, bound, batch, rng)
    }

    fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: Bound,
        batch: &Batch,
        mut rng: Option<&mut Rng64>,
    ) -> Result<Forward> {
        let enc = self
            .encoder
            .forward(tape, &bound, batch, rng.as_deref_mut())?;
        let pooled = self.pooling.forward(tape, &bound, &enc.cls)?;
        let probs =
            self.classifier
                .forward(tape, &bound, pooled, self.config.encoder.dropout, rng)?;
        Ok(Forward {
            bound,
            cls: enc.cls,
            pooled,
            probs,
        })
    }

    pub fn batch(&self, inputs: &[&PackedInput]) -> Result<Batch> {
        Batch::new(inputs, &self.config.encoder)
    }

    /// Eval-mode class distributions, one per input.
    pub fn predict_proba(&self, inputs: &[PackedInput]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let refs: Vec<_> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &batch, None)?;
            let probs = tape.value(fwd.probs);
            let c = self.config.classes;
            out.extend(probs.data().chunks_exact(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Eval-mode `[CLS]` traces, one per input.
    pub fn cls_traces(&self, inputs: &[PackedInput]) -> Result<Vec<ClsTrace>> {
        let mut out = Vec::with_capacity(inputs.len());
        let h = self.config.encoder.hidden;
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let refs: Vec<_> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let enc = self.encoder.forward(&mut tape, &bound, &batch, None)?;
            for b in 0..chunk.len() {
                let vectors = enc
                    .cls
                    .iter()
                    .map(|&v| tape.value(v).data()[b * h..(b + 1) * h].to_vec())
                    .collect();
                out.push(ClsTrace::new(vectors));
            }
        }
        Ok(out)
    }
}

/// Cross-entropy plus `λ · Σ‖w‖²` over the store's decayed parameters.
pub fn regularized_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    bound: &Bound,
    store: &ParamStore,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("negative L2 coefficient {lambda}")));
    }
    let ce = tape.cross_entropy(probs, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let mut penalty: Option<Var> = None;
    for (id, p) in store.iter() {
        if !p.decay {
            continue;
        }
        let sq = tape.sum_squares(bound[id]);
        penalty = Some(match penalty {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    match penalty {
        None => Ok(ce),
        Some(pen) => {
            let pen = tape.scale(pen, lambda);
            tape.add(ce, pen)
        }
    }
}
