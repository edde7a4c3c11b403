//! Capsule-A, Capsule-B and the primary-to-FC shortcut, their losses and
//! prediction rules.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamId, Real, SquashKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    ConvCapsuleLayer, FcCapsuleLayer, LayerStack, NGramConvLayer, PrimaryCapsuleLayer, TransformMode,
};
use crate::params::{Bound, ParamStore};
use crate::routing::RoutingConfig;
use crate::text::{EmbeddingTable, EncodedSentence};

pub const MARGIN_POSITIVE: f64 = 0.9;
pub const MARGIN_NEGATIVE: f64 = 0.1;
pub const MARGIN_DOWN_WEIGHT: f64 = 0.5;
pub const SPREAD_MARGIN: f64 = 0.2;
pub const ORPHAN_LABEL: &str = "orphan";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One branch: n-gram conv, primary, conv capsules, FC capsules.
    #[default]
    CapsuleA,
    /// Three parallel Capsule-A branches (3/4/5-grams), outputs averaged.
    CapsuleB,
    /// Primary capsules feed the FC capsules directly.
    Shortcut,
}

impl Architecture {
    pub fn default_ngrams(self) -> Vec<usize> {
        match self {
            Architecture::CapsuleB => vec![3, 4, 5],
            _ => vec![3],
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "capsule-a" | "a" => Ok(Architecture::CapsuleA),
            "capsule-b" | "b" => Ok(Architecture::CapsuleB),
            "shortcut" => Ok(Architecture::Shortcut),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected capsule-a|capsule-b|shortcut)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::CapsuleA => "capsule-a",
            Architecture::CapsuleB => "capsule-b",
            Architecture::Shortcut => "shortcut",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Margin,
    Spread,
    CrossEntropy,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Margin => "Margin",
            LossKind::Spread => "Spread",
            LossKind::CrossEntropy => "CrossEnt",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(LossKind::Margin),
            "spread" => Ok(LossKind::Spread),
            "cross-entropy" | "cross_entropy" | "crossent" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected margin|spread|cross-entropy)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Margin => "margin",
            LossKind::Spread => "spread",
            LossKind::CrossEntropy => "cross-entropy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// V
    pub embed_dim: usize,
    /// K1 per branch; empty selects the architecture default.
    pub ngram_sizes: Vec<usize>,
    /// B
    pub filters: usize,
    /// C
    pub channels: usize,
    /// d
    pub capsule_dim: usize,
    /// K2
    pub conv_window: usize,
    /// D
    pub conv_parents: usize,
    pub categories: Vec<String>,
    pub orphan: bool,
    pub shared_weights: bool,
    pub routing: RoutingConfig,
    pub loss: LossKind,
    pub squash: SquashKind,
    /// L
    pub max_len: usize,
    /// Multi-label decision threshold.
    pub threshold: f64,
    pub seed: u64,
    pub trainable_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture::CapsuleA,
            embed_dim: 300,
            ngram_sizes: Vec::new(),
            filters: 32,
            channels: 32,
            capsule_dim: 16,
            conv_window: 3,
            conv_parents: 16,
            categories: Vec::new(),
            orphan: true,
            shared_weights: false,
            routing: RoutingConfig::default(),
            loss: LossKind::Margin,
            squash: SquashKind::Ratio,
            max_len: 50,
            threshold: 0.5,
            seed: 1,
            trainable_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn ngrams(&self) -> Vec<usize> {
        if self.ngram_sizes.is_empty() {
            self.arch.default_ngrams()
        } else {
            self.ngram_sizes.clone()
        }
    }

    pub fn largest_ngram(&self) -> usize {
        self.ngrams().into_iter().max().unwrap_or(1)
    }

    /// E: categories plus the orphan slot when enabled.
    pub fn num_outputs(&self) -> usize {
        self.categories.len() + usize::from(self.orphan)
    }

    pub fn orphan_index(&self) -> Option<usize> {
        self.orphan.then_some(self.categories.len())
    }

    /// Output slot names, orphan last.
    pub fn output_labels(&self) -> Vec<String> {
        let mut labels = self.categories.clone();
        if self.orphan {
            labels.push(ORPHAN_LABEL.to_string());
        }
        labels
    }

    pub fn transform_mode(&self) -> TransformMode {
        if self.shared_weights {
            TransformMode::Shared
        } else {
            TransformMode::NonShared
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let ngrams = self.ngrams();
        match self.arch {
            Architecture::CapsuleA if ngrams.len() != 1 => {
                return cfg_err(format!("capsule-a takes a single n-gram size, got {ngrams:?}"));
            }
            Architecture::CapsuleB => {
                let mut sorted = ngrams.clone();
                sorted.sort_unstable();
                if sorted != [3, 4, 5] {
                    return cfg_err(format!("capsule-b uses the 3/4/5-gram branches, got {ngrams:?}"));
                }
            }
            _ => {}
        }
        if ngrams.contains(&0) {
            return cfg_err("n-gram sizes must be positive".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("filters", self.filters),
            ("channels", self.channels),
            ("capsule_dim", self.capsule_dim),
            ("conv_window", self.conv_window),
            ("conv_parents", self.conv_parents),
        ] {
            if v == 0 {
                return cfg_err(format!("{name} must be positive"));
            }
        }
        if self.categories.is_empty() {
            return cfg_err("no categories".into());
        }
        if self.orphan && self.categories.iter().any(|c| c == ORPHAN_LABEL) {
            return cfg_err(format!("category name {ORPHAN_LABEL:?} is reserved"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return cfg_err(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.routing.validate().map_err(|e| Error::Config(e.to_string()))?;
        let largest = self.largest_ngram();
        if self.max_len < largest {
            return cfg_err(format!(
                "max length {} is shorter than the largest n-gram size {largest}",
                self.max_len
            ));
        }
        if self.arch != Architecture::Shortcut {
            for k in &ngrams {
                if self.max_len < k + self.conv_window - 1 {
                    return cfg_err(format!(
                        "max length {} leaves no convolutional capsule positions for {k}-grams with window {}",
                        self.max_len, self.conv_window
                    ));
                }
            }
        }
        Ok(())
    }
}

fn layer_seed(base: u64, tag: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Per-example graph outputs.
#[derive(Debug, Clone)]
pub struct ClassOutputs {
    /// `[E]`, averaged over branches.
    pub probs: Var,
    /// `[E, d]`, averaged over branches.
    pub poses: Var,
    /// Final FC coefficients per branch, `[H_b, E]`.
    pub couplings: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub embedding: ParamId,
    pub branches: Vec<LayerStack>,
}

/// Instantiates embeddings and per-branch layers. Weights are
/// Glorot-uniform, biases zero.
pub fn build_model<F: Real>(mut cfg: ModelConfig, embeddings: EmbeddingTable<F>) -> Result<Model<F>> {
    cfg.validate()?;
    cfg.trainable_embeddings |= embeddings.trainable;
    if embeddings.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "embedding table has dimension {}, config expects {}",
            embeddings.dim(),
            cfg.embed_dim
        )));
    }
    let mut params = ParamStore::new();
    let embedding = params.add("embedding", embeddings.weights, cfg.trainable_embeddings);
    let mode = cfg.transform_mode();
    let mut tag = 0u64;
    let mut next_seed = || {
        tag += 1;
        layer_seed(cfg.seed, tag)
    };

    let mut branches = Vec::new();
    for (b, &k1) in cfg.ngrams().iter().enumerate() {
        let prefix = format!("branch{b}");
        let ngram = NGramConvLayer::new(&mut params, &format!("{prefix}.ngram"), k1, cfg.embed_dim, cfg.filters, next_seed())?;
        let primary = PrimaryCapsuleLayer::new(
            &mut params,
            &format!("{prefix}.primary"),
            cfg.filters,
            cfg.channels,
            cfg.capsule_dim,
            next_seed(),
        )?;
        let primary_positions = cfg.max_len - k1 + 1;
        let (conv, fc_children) = if cfg.arch == Architecture::Shortcut {
            (None, primary_positions * cfg.channels)
        } else {
            let conv = ConvCapsuleLayer::new(
                &mut params,
                &format!("{prefix}.conv_caps"),
                mode,
                cfg.conv_window,
                cfg.channels,
                cfg.conv_parents,
                cfg.capsule_dim,
                next_seed(),
            )?;
            let positions = primary_positions - cfg.conv_window + 1;
            (Some(conv), positions * cfg.conv_parents)
        };
        let fc = FcCapsuleLayer::new(
            &mut params,
            &format!("{prefix}.fc_caps"),
            mode,
            fc_children,
            cfg.num_outputs(),
            cfg.capsule_dim,
            next_seed(),
        )?;
        branches.push(LayerStack { ngram, primary, conv, fc });
    }
    Ok(Model { config: cfg, params, embedding, branches })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictMode {
    Single,
    Multi { threshold: f64 },
}

impl<F: Real> Model<F> {
    pub fn num_outputs(&self) -> usize {
        self.config.num_outputs()
    }

    pub fn bind(&self, g: &mut Graph<F>, with_grad: bool) -> Bound {
        self.params.bind(g, with_grad)
    }

    /// Embeds one sentence and runs every branch.
    pub fn forward(&self, g: &mut Graph<F>, bound: &Bound, sentence: &EncodedSentence) -> Result<ClassOutputs> {
        if sentence.indices.len() != self.config.max_len {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "sentence encoded with length {}, model expects {}",
                    sentence.indices.len(),
                    self.config.max_len
                ),
            ));
        }
        let embedded = g.gather_rows(bound.var(self.embedding), &sentence.indices)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            outs.push(branch.forward(g, bound, embedded, &self.config.routing, self.config.squash)?);
        }
        let couplings = outs.iter().map(|o| o.couplings).collect();
        if outs.len() == 1 {
            return Ok(ClassOutputs { probs: outs[0].probs, poses: outs[0].poses, couplings });
        }
        let probs: Vec<Var> = outs.iter().map(|o| o.probs).collect();
        let poses: Vec<Var> = outs.iter().map(|o| o.poses).collect();
        Ok(ClassOutputs {
            probs: average(g, &probs)?,
            poses: average(g, &poses)?,
            couplings,
        })
    }

    /// Output probabilities (orphan last) for each sentence, without
    /// gradient bookkeeping.
    pub fn scores(&self, sentences: &[EncodedSentence]) -> Result<Vec<Vec<f64>>> {
        sentences
            .iter()
            .map(|s| {
                let mut g = Graph::new();
                let bound = self.bind(&mut g, false);
                let out = self.forward(&mut g, &bound, s)?;
                Ok(g.value(out.probs).to_f64())
            })
            .collect()
    }

    pub fn predict(&self, sentences: &[EncodedSentence], mode: PredictMode) -> Result<Vec<BTreeSet<usize>>> {
        let n = self.config.categories.len();
        Ok(self.scores(sentences)?.iter().map(|p| predict(p, n, mode)).collect())
    }
}

/// Elementwise mean of equally shaped tensors.
fn average<F: Real>(g: &mut Graph<F>, items: &[Var]) -> Result<Var> {
    let mut stacked = Vec::with_capacity(items.len());
    for &v in items {
        let mut shape = vec![1];
        shape.extend_from_slice(g.shape(v));
        stacked.push(g.reshape(v, &shape)?);
    }
    let joined = g.concat(&stacked, 0)?;
    g.mean(joined, 0)
}

/// Mean loss over a batch. Targets index real categories only.
pub fn loss<F: Real>(
    g: &mut Graph<F>,
    outputs: &[ClassOutputs],
    targets: &[BTreeSet<usize>],
    kind: LossKind,
    num_categories: usize,
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(outputs.len());
    for (out, target) in outputs.iter().zip(targets) {
        let e = g.shape(out.probs)[0];
        if target.is_empty() || target.iter().any(|&t| t >= num_categories) {
            return Err(Error::Contract(format!(
                "targets {target:?} must be non-empty real categories (< {num_categories})"
            )));
        }
        if kind != LossKind::Margin && target.len() != 1 {
            return Err(Error::Contract(format!("{kind} loss needs single-label targets, got {target:?}")));
        }
        let mut onehot = vec![0.0; e];
        for &t in target {
            onehot[t] = 1.0;
        }
        terms.push(match kind {
            LossKind::Margin => margin_loss(g, out.probs, &onehot)?,
            LossKind::Spread => spread_loss(g, out.probs, &onehot)?,
            LossKind::CrossEntropy => cross_entropy_loss(g, out.probs, &onehot)?,
        });
    }
    let stacked = g.concat(&terms, 0)?;
    g.mean(stacked, 0)
}

fn margin_loss<F: Real>(g: &mut Graph<F>, probs: Var, onehot: &[f64]) -> Result<Var> {
    let e = onehot.len();
    let neg = g.scale(probs, -1.0);
    let under = g.add_scalar(neg, MARGIN_POSITIVE);
    let under = g.relu(under);
    let under = g.elementwise_mul(under, under)?;
    let pos_mask = g.constant(Tensor::from_f64(&[e], onehot)?);
    let pos = g.elementwise_mul(under, pos_mask)?;

    let over = g.add_scalar(probs, -MARGIN_NEGATIVE);
    let over = g.relu(over);
    let over = g.elementwise_mul(over, over)?;
    let weights: Vec<f64> = onehot.iter().map(|t| MARGIN_DOWN_WEIGHT * (1.0 - t)).collect();
    let neg_mask = g.constant(Tensor::from_f64(&[e], &weights)?);
    let negs = g.elementwise_mul(over, neg_mask)?;

    let total = g.add(pos, negs)?;
    Ok(g.sum(total))
}

fn spread_loss<F: Real>(g: &mut Graph<F>, probs: Var, onehot: &[f64]) -> Result<Var> {
    let e = onehot.len();
    let mask = g.constant(Tensor::from_f64(&[e], onehot)?);
    let picked = g.elementwise_mul(probs, mask)?;
    let target = g.sum(picked);
    let target = g.expand(target, &[e])?;
    let neg_target = g.scale(target, -1.0);
    // m - (a_t - a_k)
    let gap = g.add(probs, neg_target)?;
    let gap = g.add_scalar(gap, SPREAD_MARGIN);
    let gap = g.relu(gap);
    let sq = g.elementwise_mul(gap, gap)?;
    let others: Vec<f64> = onehot.iter().map(|t| 1.0 - t).collect();
    let others = g.constant(Tensor::from_f64(&[e], &others)?);
    let masked = g.elementwise_mul(sq, others)?;
    Ok(g.sum(masked))
}

fn cross_entropy_loss<F: Real>(g: &mut Graph<F>, probs: Var, onehot: &[f64]) -> Result<Var> {
    let e = onehot.len();
    let logp = g.log_softmax(probs);
    let mask = g.constant(Tensor::from_f64(&[e], onehot)?);
    let picked = g.elementwise_mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// Label decision over the real categories `0..num_categories`; trailing
/// slots (the orphan) are never predicted. Ties go to the lower index.
pub fn predict(probs: &[f64], num_categories: usize, mode: PredictMode) -> BTreeSet<usize> {
    let real = &probs[..num_categories.min(probs.len())];
    let argmax = || {
        let mut best = 0;
        for (k, &p) in real.iter().enumerate() {
            if p > real[best] {
                best = k;
            }
        }
        BTreeSet::from([best])
    };
    match mode {
        PredictMode::Single => argmax(),
        PredictMode::Multi { threshold } => {
            let picked: BTreeSet<usize> =
                real.iter().enumerate().filter(|&(_, &p)| p > threshold).map(|(k, _)| k).collect();
            if picked.is_empty() {
                argmax()
            } else {
                picked
            }
        }
    }
}
