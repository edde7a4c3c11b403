//! Connection strengths between primary-capsule positions (n-gram phrases)
//! and output categories, read off the final FC routing coefficients of the
//! shortcut architecture.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Architecture, Model};
use crate::text::{encode_example, LabeledExample, Vocabulary, PAD_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRecord {
    pub example: usize,
    pub branch: usize,
    pub position: usize,
    pub ngram: String,
    pub couplings: BTreeMap<String, f64>,
}

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// One record per (example, branch, position), couplings averaged over the
/// channels at that position.
pub fn strength_records<F: Real>(
    model: &Model<F>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<Vec<StrengthRecord>> {
    let cfg = &model.config;
    if cfg.arch != Architecture::Shortcut {
        return Err(Error::Config(format!(
            "connection strengths need the shortcut architecture, model is {}",
            cfg.arch
        )));
    }
    let labels = cfg.output_labels();
    let channels = cfg.channels;
    let per_example: Vec<Result<Vec<StrengthRecord>>> = examples
        .par_iter()
        .enumerate()
        .map(|(id, ex)| {
            let sentence = encode_example(ex, vocab, cfg.max_len, cfg.largest_ngram())?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let out = model.forward(&mut g, &bound, &sentence)?;
            let mut records = Vec::new();
            for (b, (&c, stack)) in out.couplings.iter().zip(&model.branches).enumerate() {
                let k1 = stack.ngram.ngram;
                let c = g.value(c).to_f64();
                let e = labels.len();
                let positions = c.len() / (e * channels);
                for p in 0..positions {
                    let mut mean = vec![0.0; e];
                    for ch in 0..channels {
                        let row = (p * channels + ch) * e;
                        for (m, v) in mean.iter_mut().zip(&c[row..row + e]) {
                            *m += v;
                        }
                    }
                    let ngram = (p..p + k1)
                        .map(|i| ex.tokens.get(i).map_or(PAD_TOKEN, String::as_str))
                        .collect::<Vec<_>>()
                        .join(" ");
                    let couplings = labels
                        .iter()
                        .zip(&mean)
                        .map(|(l, m)| (l.clone(), round_sig6(m / channels as f64)))
                        .collect();
                    records.push(StrengthRecord { example: id, branch: b, position: p, ngram, couplings });
                }
            }
            Ok(records)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_example {
        all.extend(r?);
    }
    Ok(all)
}

pub fn to_jsonl(records: &[StrengthRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Contract(format!("serializing record: {e}")))?;
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}

/// Writes JSON Lines to `path` and returns the record count.
pub fn export_strengths<F: Real>(
    model: &Model<F>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
    path: &Path,
) -> Result<usize> {
    let records = strength_records(model, vocab, examples)?;
    write_atomic(path, to_jsonl(&records)?.as_bytes())?;
    Ok(records.len())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StrengthRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// N-grams ranked by mean coupling toward `category`, ties broken
/// lexicographically.
pub fn top_ngrams(records: &[StrengthRecord], category: &str, k: usize) -> Result<Vec<(String, f64)>> {
    if k < 1 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if !records.iter().any(|r| r.couplings.contains_key(category)) {
        return Err(Error::Contract(format!("unknown category {category:?}")));
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(&c) = r.couplings.get(category) {
            let e = sums.entry(r.ngram.as_str()).or_default();
            e.0 += c;
            e.1 += 1;
        }
    }
    let mut ranked: Vec<(String, f64)> =
        sums.into_iter().map(|(g, (s, n))| (g.to_string(), s / n as f64)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
