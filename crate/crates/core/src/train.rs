//! Cross-entropy training with a step-decayed learning rate, validation-based
//! model selection, evaluation and feature export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::Amtfnet;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities below this are clamped before the log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Windows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 512,
            initial_lr: 0.01,
            decay_factor: 0.3,
            decay_every: 3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs, batch_size and decay_every must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "initial_lr must be positive and decay_factor in (0, 1] (got {}, {})",
                self.initial_lr, self.decay_factor
            )));
        }
        Ok(())
    }
}

/// `initial_lr · decay_factor^floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// Summed negative log-likelihood `−Σ_k ln max(p[k, y_k], 1e-12)` over the
/// rows of `probs` (`[L]` or `[B, L]`).
pub fn cross_entropy<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = probs.shape();
    let (rows, l) = match *shape.as_slice() {
        [l] => (1, l),
        [b, l] => (b, l),
        _ => return Err(Error::shape("cross_entropy", format!("expected [L] or [B, L], got {shape:?}"))),
    };
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{l}")));
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(k, &y)| k * l + y).collect();
    let loss = {
        let p = probs.value();
        picks.iter().map(|&i| -p.data()[i].max(LOG_CLAMP).ln()).sum::<f64>()
    };
    Ok(probs.tape().custom(&[probs], Tensor::scalar(loss), move |ctx| {
        let p = ctx.inputs[0].data();
        let mut g = vec![0.0; p.len()];
        for &i in &picks {
            if p[i] > LOG_CLAMP {
                g[i] = -ctx.grad[0] / p[i];
            }
        }
        vec![Some(g)]
    }))
}

/// Per-parameter optimizer memory.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: i32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Apply one update. Gradients containing NaN abort without touching any
    /// parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.data();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                    for (i, x) in p.data_mut().iter_mut().enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for (i, x) in p.data_mut().iter_mut().enumerate() {
                        m[i] = SGD_MOMENTUM * m[i] - lr * g[i];
                        *x += m[i];
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Summed cross-entropy divided by the number of training windows.
    pub loss: f64,
    pub val_micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_micro_f1: f64,
    pub train_windows: usize,
    pub val_windows: usize,
    pub parameters: usize,
}

/// Train `model` in place. Each epoch shuffles the training windows, takes
/// mini-batches in order (the last one may be short), and scores the
/// validation set; on return `model` holds the parameters of the epoch with
/// the highest validation Micro-F1 (earliest on ties).
pub fn train(
    model: &mut Amtfnet,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    config: &TrainConfig,
    seed: u64,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(seed, Stream::Dropout);
    let mut optimizer = Optimizer::new(config.optimizer);
    let labels = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars = model.params().attach(&tape, true);
            let x = tape.constant(train_set.batch(batch));
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.forward(&vars, x, true, &mut dropout_rng)?;
            let loss = cross_entropy(out.probs, &y)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
            }
            total += value;
            tape.backward(loss)?;
            let grads = vars.grads();
            drop(vars);
            optimizer.step(model.params_mut(), &grads, lr)?;
        }
        let val = evaluate(model, val_set, threads)?;
        let record = EpochRecord {
            epoch,
            lr,
            loss: total / train_set.len() as f64,
            val_micro_f1: val.micro_f1,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|b| record.val_micro_f1 > b.1) {
            best = Some((epoch, record.val_micro_f1, model.params().clone()));
        }
        records.push(record);
    }
    let (best_epoch, best_score, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_val_micro_f1: best_score,
        train_windows: train_set.len(),
        val_windows: val_set.len(),
        parameters: model.parameter_count(),
    })
}

/// Threads for evaluation: `AMTFNET_THREADS` if set to a positive integer,
/// else the available parallelism.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("AMTFNET_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("AMTFNET_THREADS must be a positive integer, got {s:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Apply `f` to consecutive index chunks, spreading chunks over `threads`
/// workers; results come back in chunk order.
fn map_chunks<T: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(&[usize]) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let indices: Vec<usize> = (0..n).collect();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return chunks.into_iter().map(&f).collect();
    }
    let per = chunks.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || group.iter().map(|c| f(c)).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(chunks.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class (first maximum) per window.
pub fn predict(model: &Amtfnet, ds: &WindowedDataset, threads: usize) -> Result<Vec<usize>> {
    let l = model.config().num_classes;
    let parts = map_chunks(ds.len(), threads, |chunk| {
        let probs = model.predict(&ds.batch(chunk))?;
        Ok(probs.data().chunks(l).map(argmax).collect::<Vec<_>>())
    })?;
    Ok(parts.concat())
}

pub fn evaluate(model: &Amtfnet, ds: &WindowedDataset, threads: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let predicted = predict(model, ds, threads)?;
    let cm = ConfusionMatrix::from_predictions(model.config().num_classes, &ds.labels(), &predicted)?;
    EvalReport::from_confusion(cm)
}

/// CSV of the classifier input per window: `f0..f{F-1},label[,mode]`.
pub fn export_features(model: &Amtfnet, ds: &WindowedDataset, path: &Path, threads: usize) -> Result<()> {
    let parts = map_chunks(ds.len(), threads, |chunk| model.extract_features(&ds.batch(chunk)))?;
    let width = parts.first().map_or(model.config().feature_height(), |t| t.shape()[1]);
    let has_mode = ds.windows().first().is_some_and(|r| r.mode.is_some());
    let mut text = (0..width).map(|i| format!("f{i}")).collect::<Vec<_>>().join(",");
    text.push_str(if has_mode { ",label,mode\n" } else { ",label\n" });
    let rows = parts.iter().flat_map(|t| t.data().chunks(width));
    for (row, r) in rows.zip(ds.windows()) {
        for x in row {
            text.push_str(&x.to_string());
            text.push(',');
        }
        text.push_str(&r.label.to_string());
        if let Some(m) = r.mode.filter(|_| has_mode) {
            text.push_str(&format!(",{m}"));
        }
        text.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
