use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LabelSet = BTreeSet<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MetricsReport {
    Single {
        examples: usize,
        correct: usize,
        accuracy: f64,
    },
    Multi {
        examples: usize,
        #[serde(rename = "er")]
        exact_match_ratio: f64,
        precision: f64,
        recall: f64,
        f1: f64,
        tp: usize,
        fp: usize,
        #[serde(rename = "fn")]
        fn_: usize,
        #[serde(default, skip_serializing_if = "Option::is_none", rename = "macro")]
        macro_avg: Option<MacroScores>,
    },
}

impl MetricsReport {
    /// Accuracy for single-label reports, micro-F1 for multi-label ones.
    pub fn headline(&self) -> f64 {
        match self {
            MetricsReport::Single { accuracy, .. } => *accuracy,
            MetricsReport::Multi { f1, .. } => *f1,
        }
    }

    /// Two-column `name  value` rows for terminal output.
    pub fn rows(&self) -> Vec<(String, String)> {
        let f = |x: f64| format!("{x:.4}");
        match self {
            MetricsReport::Single { examples, correct, accuracy } => vec![
                ("examples".into(), examples.to_string()),
                ("correct".into(), correct.to_string()),
                ("accuracy".into(), f(*accuracy)),
            ],
            MetricsReport::Multi { examples, exact_match_ratio, precision, recall, f1, tp, fp, fn_, macro_avg } => {
                let mut rows = vec![
                    ("examples".into(), examples.to_string()),
                    ("exact match ratio".into(), f(*exact_match_ratio)),
                    ("micro precision".into(), f(*precision)),
                    ("micro recall".into(), f(*recall)),
                    ("micro F1".into(), f(*f1)),
                    ("TP".into(), tp.to_string()),
                    ("FP".into(), fp.to_string()),
                    ("FN".into(), fn_.to_string()),
                ];
                if let Some(m) = macro_avg {
                    rows.push(("macro precision".into(), f(m.precision)));
                    rows.push(("macro recall".into(), f(m.recall)));
                    rows.push(("macro F1".into(), f(m.f1)));
                }
                rows
            }
        }
    }

    pub fn table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v:>10}\n")).collect()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_lengths(truth: &[LabelSet], preds: &[LabelSet]) -> Result<()> {
    if truth.len() != preds.len() {
        return Err(Error::Contract(format!("{} truths for {} predictions", truth.len(), preds.len())));
    }
    Ok(())
}

/// Exact-match accuracy; every truth must be a single label.
pub fn single_label_report(truth: &[LabelSet], preds: &[LabelSet]) -> Result<MetricsReport> {
    check_lengths(truth, preds)?;
    if let Some(i) = truth.iter().position(|t| t.len() != 1) {
        return Err(Error::Contract(format!("example {i} has {} labels, expected one", truth[i].len())));
    }
    let correct = truth.iter().zip(preds).filter(|(t, p)| t == p).count();
    Ok(MetricsReport::Single { examples: truth.len(), correct, accuracy: ratio(correct, truth.len()) })
}

/// Exact match ratio plus micro P/R/F1 from counts pooled over every
/// (example, label) pair. Macro averages over `0..num_categories` are added
/// when `with_macro` is set.
pub fn multi_label_report(
    truth: &[LabelSet],
    preds: &[LabelSet],
    num_categories: usize,
    with_macro: bool,
) -> Result<MetricsReport> {
    check_lengths(truth, preds)?;
    let mut per_class = vec![(0usize, 0usize, 0usize); num_categories];
    let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
    for (t, p) in truth.iter().zip(preds) {
        if t == p {
            exact += 1;
        }
        for &k in p {
            let hit = t.contains(&k);
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            if let Some(c) = per_class.get_mut(k) {
                if hit {
                    c.0 += 1;
                } else {
                    c.1 += 1;
                }
            }
        }
        for &k in t.difference(p) {
            fn_ += 1;
            if let Some(c) = per_class.get_mut(k) {
                c.2 += 1;
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let macro_avg = (with_macro && num_categories > 0).then(|| {
        let n = num_categories as f64;
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for &(ctp, cfp, cfn) in &per_class {
            let cp = ratio(ctp, ctp + cfp);
            let cr = ratio(ctp, ctp + cfn);
            p += cp;
            r += cr;
            f += f1_score(cp, cr);
        }
        MacroScores { precision: p / n, recall: r / n, f1: f / n }
    });
    Ok(MetricsReport::Multi {
        examples: truth.len(),
        exact_match_ratio: ratio(exact, truth.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp,
        fp,
        fn_,
        macro_avg,
    })
}
