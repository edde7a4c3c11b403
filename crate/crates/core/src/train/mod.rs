//! Mini-batch training, evaluation and persistence.

mod adam;
mod checkpoint;
mod history;
mod metrics;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    MAGIC, VERSION,
};
pub use history::{StepRecord, TrainHistory, HISTORY_HEADER};
pub use metrics::{multi_label_report, single_label_report, LabelSet, MacroScores, MetricsReport};

use crate::diff::{GradientMap, Graph, Precision, Real};
use crate::error::{Error, Result};
use crate::model::{loss, Model, PredictMode};
use crate::text::{encode_example, EncodedSentence, LabeledExample, Vocabulary, PAD_INDEX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 25, epochs: 10, seed: 1, shuffle: true, precision: Precision::F32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be a finite non-negative number", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// An encoded sentence with category indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sentence: EncodedSentence,
    pub labels: LabelSet,
}

/// Encodes examples against the model's vocabulary, length and categories.
/// Unknown labels are a configuration error.
pub fn prepare_samples<F: Real>(
    model: &Model<F>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<Vec<Sample>> {
    let cfg = &model.config;
    examples
        .iter()
        .map(|ex| {
            let labels = ex
                .labels
                .iter()
                .map(|l| {
                    cfg.categories.iter().position(|c| c == l).ok_or_else(|| {
                        Error::Config(format!("label {l:?} (line {}) is not a model category", ex.line))
                    })
                })
                .collect::<Result<BTreeSet<_>>>()?;
            let sentence = encode_example(ex, vocab, cfg.max_len, cfg.largest_ngram())?;
            Ok(Sample { sentence, labels })
        })
        .collect()
}

/// Loss and parameter gradients of one batch, averaged over its examples.
/// Examples run on separate graphs in parallel; gradients are summed in
/// batch order, so the result does not depend on the thread count.
pub fn batch_gradients<F: Real>(model: &Model<F>, batch: &[&Sample]) -> Result<(f64, GradientMap<F>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n_cat = model.config.categories.len();
    let kind = model.config.loss;
    let per_example: Vec<Result<(f64, GradientMap<F>)>> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let out = model.forward(&mut g, &bound, &s.sentence)?;
            let l = loss(&mut g, &[out], std::slice::from_ref(&s.labels), kind, n_cat)?;
            let l = g.scale(l, 1.0 / batch.len() as f64);
            let value = g.value(l).data()[0].as_f64();
            Ok((value, g.backward(l)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = GradientMap::new();
    for r in per_example {
        let (l, gm) = r?;
        total += l;
        grads.accumulate(&gm)?;
    }
    Ok((total, grads))
}

fn dev_metric<F: Real>(model: &Model<F>, dev: &[Sample]) -> Result<f64> {
    if dev.iter().any(|s| s.labels.len() != 1) {
        Ok(evaluate_multi(model, dev, model.config.threshold, false)?.headline())
    } else {
        Ok(evaluate_single(model, dev)?.headline())
    }
}

/// Adam over shuffled mini-batches. With a non-empty dev split the
/// parameters of the best dev epoch (accuracy, or micro-F1 when dev holds
/// multi-label examples) are restored at the end.
pub fn train<F: Real>(
    model: &mut Model<F>,
    train_set: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if model.config.loss != crate::model::LossKind::Margin {
        if let Some(s) = train_set.iter().find(|s| s.labels.len() != 1) {
            return Err(Error::Contract(format!(
                "{} loss needs single-label training data, found labels {:?}",
                model.config.loss, s.labels
            )));
        }
    }
    let hyper = AdamHyper { learning_rate: cfg.learning_rate, ..AdamHyper::default() };
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, crate::params::ParamStore<F>)> = None;
    let start = Instant::now();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for ids in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Sample> = ids.iter().map(|&i| &train_set[i]).collect();
            let (l, mut grads) = batch_gradients(model, &batch)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch: ids.to_vec() });
            }
            if let Some(g) = grads.get_mut(model.embedding) {
                let dim = g.shape()[1];
                g.data_mut()[PAD_INDEX * dim..(PAD_INDEX + 1) * dim].fill(F::zero());
            }
            adam_step(&mut model.params, &grads, &mut state, &hyper)?;
            history.steps.push(StepRecord {
                step,
                epoch,
                loss: l,
                dev_metric: None,
                timestamp_ms: start.elapsed().as_millis(),
            });
        }
        if !dev.is_empty() {
            let m = dev_metric(model, dev)?;
            if let Some(last) = history.steps.last_mut() {
                last.dev_metric = Some(m);
            }
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.params.clone()));
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        model.params = params;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

/// Per-sample output probabilities, computed in parallel.
pub fn score_samples<F: Real>(model: &Model<F>, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| Ok(model.scores(std::slice::from_ref(&s.sentence))?.remove(0)))
        .collect()
}

pub fn evaluate_single<F: Real>(model: &Model<F>, samples: &[Sample]) -> Result<MetricsReport> {
    if let Some(i) = samples.iter().position(|s| s.labels.len() != 1) {
        return Err(Error::Contract(format!("example {i} is multi-label; use the multi-label evaluation")));
    }
    let n = model.config.categories.len();
    let preds: Vec<LabelSet> = score_samples(model, samples)?
        .iter()
        .map(|p| crate::model::predict(p, n, PredictMode::Single))
        .collect();
    let truth: Vec<LabelSet> = samples.iter().map(|s| s.labels.clone()).collect();
    single_label_report(&truth, &preds)
}

pub fn evaluate_multi<F: Real>(
    model: &Model<F>,
    samples: &[Sample],
    threshold: f64,
    with_macro: bool,
) -> Result<MetricsReport> {
    let n = model.config.categories.len();
    let preds: Vec<LabelSet> = score_samples(model, samples)?
        .iter()
        .map(|p| crate::model::predict(p, n, PredictMode::Multi { threshold }))
        .collect();
    let truth: Vec<LabelSet> = samples.iter().map(|s| s.labels.clone()).collect();
    multi_label_report(&truth, &preds, n, with_macro)
}
