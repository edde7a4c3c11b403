//! End-to-end runs: vocabulary, embeddings, model construction, training
//! and evaluation over a set of splits.

use crate::config::RunConfig;
use crate::diff::Real;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::text::{build_vocab, default_max_len, load_embeddings, DatasetSplits, EmbeddingTable, Vocabulary};
use crate::train::{
    evaluate_multi, evaluate_single, prepare_samples, train, MetricsReport, Sample, TrainConfig, TrainHistory,
};

#[derive(Debug, Clone)]
pub struct Trained<F: Real> {
    pub model: Model<F>,
    pub vocab: Vocabulary,
    pub history: TrainHistory,
}

/// Fills the data-dependent parts of `run.model`: categories, and the
/// sequence length when it was left on auto.
pub fn resolve_for_data(run: &mut RunConfig, splits: &DatasetSplits) {
    run.model.categories = splits.categories.clone();
    let len = run.max_len.unwrap_or_else(|| default_max_len(&splits.train));
    run.model.max_len = len.max(min_len_for(&run.model));
}

/// Shortest sequence length that leaves at least one capsule position.
pub fn min_len_for(cfg: &ModelConfig) -> usize {
    let k1 = cfg.largest_ngram();
    match cfg.arch {
        crate::model::Architecture::Shortcut => k1,
        _ => k1 + cfg.conv_window - 1,
    }
}

/// Pretrained vectors when a file is configured, random ones otherwise.
pub fn embeddings_for<F: Real>(run: &RunConfig, vocab: &Vocabulary) -> Result<EmbeddingTable<F>> {
    let mut table = match &run.embeddings {
        Some(path) => load_embeddings(path, vocab, run.model.embed_dim, run.model.seed)?,
        None => EmbeddingTable::random(vocab.len(), run.model.embed_dim, run.model.seed)?,
    };
    table.trainable = run.model.trainable_embeddings;
    Ok(table)
}

/// Builds a model from `model_cfg` and trains it on `splits.train`,
/// selecting on `splits.dev`.
pub fn fit<F: Real>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    embeddings: EmbeddingTable<F>,
    vocab: &Vocabulary,
    splits: &DatasetSplits,
) -> Result<Trained<F>> {
    let mut model = build_model(model_cfg.clone(), embeddings)?;
    let train_set = prepare_samples(&model, vocab, &splits.train)?;
    let dev = prepare_samples(&model, vocab, &splits.dev)?;
    let history = train(&mut model, &train_set, &dev, train_cfg)?;
    Ok(Trained { model, vocab: vocab.clone(), history })
}

/// Full pipeline from a resolved run configuration.
pub fn fit_run<F: Real>(run: &RunConfig, splits: &DatasetSplits) -> Result<Trained<F>> {
    if splits.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let vocab = build_vocab(&splits.train, run.min_count)?;
    let embeddings = embeddings_for(run, &vocab)?;
    fit(&run.model, &run.train, embeddings, &vocab, splits)
}

/// Accuracy when every sample is single-label, otherwise the multi-label
/// report at `threshold`.
pub fn evaluate_auto<F: Real>(
    model: &Model<F>,
    samples: &[Sample],
    threshold: f64,
    with_macro: bool,
) -> Result<MetricsReport> {
    if samples.iter().all(|s| s.labels.len() == 1) {
        evaluate_single(model, samples)
    } else {
        evaluate_multi(model, samples, threshold, with_macro)
    }
}
