//! Tokenization, vocabularies, pretrained embeddings and TSV datasets.

mod dataset;
mod embeddings;

pub use dataset::{load_dataset, load_split, DatasetSplits, LabeledExample};
pub use embeddings::{load_embeddings, EmbeddingTable};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Lowercases, then splits into maximal alphanumeric runs; every other
/// non-whitespace character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token to index mapping. Index 0 is padding, index 1 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds from regular tokens; reserved slots are prepended.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Collects tokens seen at least `min_count` times, ordered by descending
/// frequency and then lexicographically.
pub fn build_vocab(corpus: &[LabeledExample], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Contract("min_count must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in corpus {
        for tok in &ex.tokens {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())))
}

/// Index sequence of fixed length, padded at the tail with [`PAD_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub indices: Vec<usize>,
    pub original_len: usize,
}

/// Truncates or pads `ex` to `max_len` indices. `max_len` must cover the
/// model's largest n-gram window.
pub fn encode_example(
    ex: &LabeledExample,
    vocab: &Vocabulary,
    max_len: usize,
    largest_ngram: usize,
) -> Result<EncodedSentence> {
    encode_tokens(&ex.tokens, vocab, max_len, largest_ngram)
}

pub fn encode_tokens(
    tokens: &[String],
    vocab: &Vocabulary,
    max_len: usize,
    largest_ngram: usize,
) -> Result<EncodedSentence> {
    if max_len < largest_ngram.max(1) {
        return Err(Error::Config(format!(
            "max length {max_len} is shorter than the largest n-gram size {largest_ngram}"
        )));
    }
    let mut indices: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.lookup(t)).collect();
    indices.resize(max_len, PAD_INDEX);
    Ok(EncodedSentence { indices, original_len: tokens.len() })
}

/// 95th-percentile token count of `examples`, at least 1.
pub fn default_max_len(examples: &[LabeledExample]) -> usize {
    if examples.is_empty() {
        return 1;
    }
    let mut lens: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
    lens.sort_unstable();
    let rank = ((0.95 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
    lens[rank - 1].max(1)
}
