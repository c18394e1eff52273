//! Mini-batch Adam training with validation-based early stopping, evaluation
//! and the method comparison report.

use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result, TensorError};
use crate::metrics::{Metrics, MetricsAccumulator};
use crate::model::{example_loss, Mode, SanConfig, SanModel, Variant};
use crate::param::{AdamConfig, ParamGrads};
use crate::split::CorpusSplit;
use crate::tape::Tape;
use crate::vocab::{Vocabulary, PAD};

/// Examples per parallel work item. Gradients are summed inside a chunk and
/// then across chunks in chunk order, so results do not depend on the number
/// of threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is not usable",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Summed cross-entropy over the epoch divided by the number of
    /// training examples, measured on the dropout passes used for updates.
    pub train_loss: f64,
    pub validation: Metrics,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation span F1.
    pub model: SanModel,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

/// Dropout generator for one example in one epoch.
fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ index as u64);
    rng
}

/// Summed loss and gradient over `batch`, which holds indices into
/// `examples`.
fn batch_gradient(
    model: &SanModel,
    examples: &[Example],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> std::result::Result<(f64, ParamGrads), TensorError> {
    let group = &model.params.group;
    let layout = &model.params.layout;
    let partials: Vec<std::result::Result<(f64, ParamGrads), TensorError>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(group);
            let mut total = 0.0;
            for &i in chunk {
                let mut rng = example_rng(seed, epoch, i);
                let mut tape = Tape::new(group);
                let loss = example_loss(
                    &mut tape,
                    layout,
                    &model.config,
                    &examples[i].input,
                    Mode::Train(&mut rng),
                )?;
                total += tape.value(loss).scalar();
                grads.merge(tape.backward(loss)?.params());
            }
            Ok((total, grads))
        })
        .collect();
    let mut grads = ParamGrads::zeros_like(group);
    let mut total = 0.0;
    for p in partials {
        let (l, g) = p?;
        total += l;
        grads.merge(&g);
    }
    if !total.is_finite() {
        return Err(TensorError::NonFinite("batch loss"));
    }
    grads.slot_mut(layout.embedding).clear_row(PAD);
    Ok((total, grads))
}

/// Eval-mode loss summed over `examples`.
pub fn dataset_loss(model: &SanModel, examples: &[Example]) -> Result<f64> {
    let losses: Vec<std::result::Result<f64, TensorError>> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.params.group);
            let l = example_loss(
                &mut tape,
                &model.params.layout,
                &model.config,
                &ex.input,
                Mode::Eval,
            )?;
            Ok(tape.value(l).scalar())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total)
}

/// One optimizer step on the whole of `batch`.
pub fn train_step(
    model: &mut SanModel,
    examples: &[Example],
    batch: &[usize],
    adam: &AdamConfig,
    seed: u64,
    epoch: usize,
) -> std::result::Result<f64, TensorError> {
    let (loss, grads) = batch_gradient(model, examples, batch, seed, epoch)?;
    model.params.group.adam_step(&grads, adam)?;
    Ok(loss)
}

/// Trains `model` in place and returns the best parameters seen.
/// `on_epoch` receives every log line as soon as it is produced.
pub fn train(
    mut model: SanModel,
    train_set: &[Example],
    validation: &[Example],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let selection = if validation.is_empty() {
        warn!("validation set is empty; selecting on the training set");
        train_set
    } else {
        validation
    };
    let adam = tcfg.adam();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut best: Option<(f64, usize, SanModel)> = None;
    let mut since_best = 0;
    let mut logs = Vec::new();

    for epoch in 1..=tcfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            total += train_step(&mut model, train_set, batch, &adam, tcfg.seed, epoch).map_err(
                |source| Error::Diverged {
                    epoch,
                    batch: b + 1,
                    source,
                },
            )?;
        }
        let metrics = evaluate(&model, selection)?;
        let log = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            validation: metrics,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5}, validation span F1 {:.4}",
            log.train_loss, metrics.span_f1
        );
        on_epoch(&log);
        logs.push(log);

        if best.as_ref().is_none_or(|(f, _, _)| metrics.span_f1 > *f) {
            best = Some((metrics.span_f1, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                info!("no improvement for {since_best} epochs; stopping");
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        logs,
    })
}

/// Predicted tags for every example, in input order.
pub fn predict_all(
    model: &SanModel,
    examples: &[Example],
) -> Result<Vec<Vec<crate::model::Label>>> {
    let preds: Vec<std::result::Result<_, TensorError>> = examples
        .par_iter()
        .map(|ex| model.predict(&ex.input).map(|p| p.tags))
        .collect();
    preds.into_iter().map(|p| p.map_err(Error::from)).collect()
}

/// Span and token metrics against gold tags. Unlabeled examples are an error.
pub fn evaluate(model: &SanModel, examples: &[Example]) -> Result<Metrics> {
    if let Some(ex) = examples.iter().find(|e| e.input.gold.is_none()) {
        return Err(Error::Data(format!(
            "cannot evaluate on an unlabeled question ({})",
            ex.tokens.join(" ")
        )));
    }
    let preds = predict_all(model, examples)?;
    let mut acc = MetricsAccumulator::default();
    for (ex, pred) in examples.iter().zip(&preds) {
        let n = ex.input.question.valid_len();
        acc.add(
            pred,
            ex.gold_tags().expect("checked"),
            &ex.input.question.ids[..n],
        );
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metrics: Metrics,
}

/// Published scores of a method that is not run here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub reference: Vec<ReferenceRow>,
}

pub fn crf_reference() -> ReferenceRow {
    ReferenceRow {
        method: "CRF".into(),
        precision: 0.798,
        recall: 0.611,
        f1: 0.692,
    }
}

impl ComparisonReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        ComparisonReport {
            rows,
            reference: vec![crf_reference()],
        }
    }

    /// `Method | Precision | Recall | F1` on span-level scores, reference
    /// rows last and marked with `*`.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(self.reference.iter().map(|r| r.method.len() + 1))
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        writeln!(out, "{:<width$} | Precision | Recall | F1", "Method").unwrap();
        writeln!(out, "{}-+-----------+--------+-------", "-".repeat(width)).unwrap();
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                out,
                "{:<width$} | {:>9.3} | {:>6.3} | {:.3}",
                r.method, m.span_precision, m.span_recall, m.span_f1
            )
            .unwrap();
        }
        for r in &self.reference {
            writeln!(
                out,
                "{:<width$} | {:>9.3} | {:>6.3} | {:.3}",
                format!("{}*", r.method),
                r.precision,
                r.recall,
                r.f1
            )
            .unwrap();
        }
        if !self.reference.is_empty() {
            out.push_str("* published reference value, not computed\n");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Trains every variant on the same split with the same seeds and scores each
/// on the test part.
pub fn compare_methods(
    base: &SanConfig,
    vocab: &Vocabulary,
    embedding: Option<&EmbeddingMatrix>,
    split: &CorpusSplit<Example>,
    tcfg: &TrainConfig,
    variants: &[Variant],
) -> Result<ComparisonReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = SanConfig {
            variant: v,
            ..base.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = SanModel::new(cfg, vocab.clone(), embedding.cloned(), &mut rng)?;
        let out = train(model, &split.train, &split.validation, tcfg, |_| {})?;
        let metrics = evaluate(&out.model, &split.test)?;
        info!("{}: {metrics}", v.display_name());
        rows.push(ReportRow {
            method: v.display_name().to_string(),
            metrics,
        });
    }
    Ok(ComparisonReport::new(rows))
}
