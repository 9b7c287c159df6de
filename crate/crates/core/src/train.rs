//! Training loop, evaluation and the k-fold cross-validation protocol.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::analysis::{write_layer_dumps, LayerDump};
use crate::data::{pack_pair, vocab_for, PairExample, Vocab};
use crate::encoder::{EncoderConfig, PackedInput};
use crate::error::{contract, Error, Result};
use crate::kfold::kfold_split;
use crate::metrics::EvalResult;
use crate::model::{regularized_loss, Model, ModelConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::pooling::{argmax, PoolingKind};
use crate::rng::{derive_seed, stream, Stream};
use crate::tape::Tape;

/// Learning rate for from-scratch runs.
pub const DESK_LR: f64 = 1e-3;
/// Learning rate for fine-tuning a pretrained encoder.
pub const FINE_TUNE_LR: f64 = 2e-5;

/// Task family; decides the epoch budget and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskShape {
    /// Fixed epochs, final weights evaluated.
    Absa,
    /// Best epoch on a held-out dev slice of the training data is kept.
    Nli,
}

impl TaskShape {
    pub fn default_epochs(self) -> usize {
        match self {
            TaskShape::Absa => 10,
            TaskShape::Nli => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// L2 coefficient on weight matrices and embeddings.
    pub lambda: f64,
    pub lr: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub task: TaskShape,
    /// Fraction of each training split held out as dev data for `Nli` runs.
    pub dev_fraction: f64,
    /// Train folds on worker threads.
    pub parallel: bool,
}

impl TrainConfig {
    /// Defaults for training from random initialization.
    pub fn desk(task: TaskShape) -> Self {
        Self {
            lambda: 1e-5,
            lr: DESK_LR,
            dropout: 0.1,
            epochs: task.default_epochs(),
            folds: 10,
            seed: 0,
            batch_size: 32,
            task,
            dev_fraction: 0.1,
            parallel: true,
        }
    }

    /// Defaults for fine-tuning a pretrained encoder.
    pub fn fine_tuning(task: TaskShape) -> Self {
        Self {
            lr: FINE_TUNE_LR,
            ..Self::desk(task)
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev fraction {} outside [0, 1)", self.dev_fraction));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(TaskShape::Absa)
    }
}

/// A packed example ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub input: PackedInput,
    pub label: usize,
}

pub fn encode_examples(
    examples: &[PairExample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|e| {
            Ok(Encoded {
                input: pack_pair(e, vocab, max_len)?,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Dev accuracy per epoch (`Nli` runs only).
    pub dev_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

/// One optimizer step on `batch`. Returns the regularized loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Encoded],
    lambda: f64,
    dropout_rng: &mut crate::rng::Rng64,
) -> Result<f64> {
    let inputs: Vec<_> = batch.iter().map(|e| &e.input).collect();
    let labels: Vec<_> = batch.iter().map(|e| e.label).collect();
    let b = model.batch(&inputs)?;
    let mut tape = Tape::new();
    let fwd = model.forward_trainable(&mut tape, &b, Some(dropout_rng))?;
    let loss = regularized_loss(
        &mut tape,
        fwd.probs,
        &labels,
        &fwd.bound,
        &model.store,
        lambda,
    )?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let grads = fwd.bound.grads(&mut grads);
    adam.step(&mut model.store, &grads)?;
    Ok(value)
}

/// Trains `model` in place.
///
/// `seed` drives batch shuffling, dropout and the dev split. `on_epoch` runs
/// after every epoch with the 1-based epoch number.
pub fn train_model(
    model: &mut Model,
    data: &[Encoded],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("no training data"));
    }
    let mut shuffle_rng = stream(seed, Stream::Shuffle);
    let mut dropout_rng = stream(seed, Stream::Dropout);

    let (train, dev): (Vec<&Encoded>, Vec<&Encoded>) = match cfg.task {
        TaskShape::Absa => (data.iter().collect(), Vec::new()),
        TaskShape::Nli => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut stream(seed, Stream::Split));
            let n_dev = ((data.len() as f64) * cfg.dev_fraction).round() as usize;
            let n_dev = n_dev.min(data.len() - 1);
            let dev = idx[..n_dev].iter().map(|&i| &data[i]).collect();
            let train = idx[n_dev..].iter().map(|&i| &data[i]).collect();
            (train, dev)
        }
    };

    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| train[i]).collect();
            total += train_step(model, &mut adam, &batch, cfg.lambda, &mut dropout_rng)?;
            steps += 1;
        }
        log.epoch_losses.push(total / steps as f64);
        if !dev.is_empty() {
            let dev_owned: Vec<Encoded> = dev.iter().map(|e| (*e).clone()).collect();
            let acc = evaluate(model, &dev_owned)?.accuracy;
            log.dev_accuracy.push(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.store.clone()));
                log.selected_epoch = epoch;
            }
        } else {
            log.selected_epoch = epoch;
        }
        on_epoch(epoch, model)?;
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(log)
}

/// Eval-mode predictions (dropout off) scored against the labels.
pub fn evaluate(model: &Model, data: &[Encoded]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on empty data"));
    }
    let inputs: Vec<PackedInput> = data.iter().map(|e| e.input.clone()).collect();
    let probs = model.predict_proba(&inputs)?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let actual: Vec<usize> = data.iter().map(|e| e.label).collect();
    EvalResult::from_predictions(&predicted, &actual, model.config.classes)
}

/// Everything needed to train one model per fold.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// Encoder shape. `vocab` and `dropout` are filled in per run.
    pub encoder: EncoderConfig,
    pub pooling: PoolingKind,
    pub classes: usize,
    pub train: TrainConfig,
    pub min_count: usize,
    pub dump: Option<DumpRequest>,
}

impl Experiment {
    pub fn desk(pooling: PoolingKind, train: TrainConfig) -> Self {
        Self {
            encoder: EncoderConfig::desk(0),
            pooling,
            classes: 3,
            train,
            min_count: 1,
            dump: None,
        }
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab: vocab.len(),
                dropout: self.train.dropout,
                ..self.encoder.clone()
            },
            pooling: self.pooling,
            classes: self.classes,
        }
    }
}

/// Per-layer `[CLS]` dumps of one fold's held-out data at chosen epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRequest {
    pub dir: PathBuf,
    pub fold: usize,
    pub epochs: Vec<usize>,
    /// 1-based layers; empty means all.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub result: EvalResult,
    pub log: TrainLog,
    pub model: Model,
    pub vocab: Vocab,
    pub test_indices: Vec<usize>,
}

/// Aggregate of per-fold metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldOutcome>,
    pub mean: MetricSummary,
    pub stddev: MetricSummary,
}

/// Seed of fold `fold` under master seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, 1000 + fold as u64)
}

/// Trains a fresh model on `train_idx` and evaluates it on `test_idx`.
pub fn run_fold(
    dataset: &[PairExample],
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    exp: &Experiment,
) -> Result<FoldOutcome> {
    let seed = fold_seed(exp.train.seed, fold);
    let train_ex: Vec<PairExample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let test_ex: Vec<PairExample> = test_idx.iter().map(|&i| dataset[i].clone()).collect();
    let vocab = vocab_for(&train_ex, exp.min_count)?;
    let cfg = exp.model_config(&vocab);
    let max_len = cfg.encoder.max_len;
    let train = encode_examples(&train_ex, &vocab, max_len)?;
    let test = encode_examples(&test_ex, &vocab, max_len)?;
    let mut model = Model::new(cfg, &mut stream(seed, Stream::Init))?;

    let dump = exp.dump.as_ref().filter(|d| d.fold == fold);
    let mut hook = |epoch: usize, m: &Model| -> Result<()> {
        if let Some(req) = dump {
            if req.epochs.contains(&epoch) {
                let dumps = LayerDump::collect(m, &test, test_idx, epoch, &req.layers)?;
                write_layer_dumps(&req.dir, &dumps)?;
            }
        }
        Ok(())
    };
    let log = train_model(&mut model, &train, &exp.train, seed, &mut hook)?;
    let result = evaluate(&model, &test)?;
    Ok(FoldOutcome {
        fold,
        result,
        log,
        model,
        vocab,
        test_indices: test_idx.to_vec(),
    })
}

/// Stratified k-fold cross-validation: one fresh model per fold.
pub fn cross_validated_train(dataset: &[PairExample], exp: &Experiment) -> Result<CvReport> {
    exp.train.validate()?;
    let labels: Vec<usize> = dataset.iter().map(|e| e.label).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= exp.classes) {
        return Err(Error::Index {
            what: "label",
            index: bad,
            bound: exp.classes,
        });
    }
    let split_seed = derive_seed(exp.train.seed, Stream::Split as u64);
    let folds = kfold_split(&labels, exp.train.folds, split_seed)?;
    let run = |(k, f): (usize, &crate::kfold::Fold)| run_fold(dataset, k, &f.train, &f.test, exp);
    let outcomes: Vec<FoldOutcome> = if exp.train.parallel {
        folds
            .par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        folds.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    let results: Vec<&EvalResult> = outcomes.iter().map(|o| &o.result).collect();
    let (mean, stddev) = summarize(&results);
    Ok(CvReport {
        folds: outcomes,
        mean,
        stddev,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of each metric across folds.
pub fn summarize(results: &[&EvalResult]) -> (MetricSummary, MetricSummary) {
    let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = results.iter().map(|r| r.macro_f1).collect();
    let classes = results.first().map_or(0, |r| r.per_class_f1.len());
    let (am, asd) = mean_std(&acc);
    let (fm, fsd) = mean_std(&f1);
    let (pcm, pcs): (Vec<f64>, Vec<f64>) = (0..classes)
        .map(|c| {
            let xs: Vec<f64> = results.iter().map(|r| r.per_class_f1[c]).collect();
            mean_std(&xs)
        })
        .unzip();
    (
        MetricSummary {
            accuracy: am,
            macro_f1: fm,
            per_class_f1: pcm,
        },
        MetricSummary {
            accuracy: asd,
            macro_f1: fsd,
            per_class_f1: pcs,
        },
    )
}

impl CvReport {
    /// Results table: one row per fold, then `mean` and `stddev` rows.
    ///
    /// Columns: `fold,accuracy,macro_f1,f1_0,…,f1_{C-1},empty_classes`, where
    /// `empty_classes` lists (`;`-separated) classes with no true and no
    /// predicted instances in that fold.
    pub fn to_csv(&self) -> String {
        let classes = self.mean.per_class_f1.len();
        let mut out = String::from("fold,accuracy,macro_f1");
        for c in 0..classes {
            let _ = write!(out, ",f1_{c}");
        }
        out.push_str(",empty_classes\n");
        for f in &self.folds {
            let r = &f.result;
            let _ = write!(out, "{},{},{}", f.fold, r.accuracy, r.macro_f1);
            for v in &r.per_class_f1 {
                let _ = write!(out, ",{v}");
            }
            let empty: Vec<String> = r.empty_classes.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, ",{}", empty.join(";"));
        }
        for (name, s) in [("mean", &self.mean), ("stddev", &self.stddev)] {
            let _ = write!(out, "{name},{},{}", s.accuracy, s.macro_f1);
            for v in &s.per_class_f1 {
                let _ = write!(out, ",{v}");
            }
            out.push_str(",\n");
        }
        out
    }
}
