//! Independent reference implementations written with plain loops.

use std::collections::BTreeSet;

/// Output of the loop-based router.
#[derive(Debug, Clone)]
pub struct OracleRoute {
    pub parents: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub couplings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSquash {
    Ratio,
    Exp,
    Tanh,
    Identity,
}

pub fn squash_vec(s: &[f64], kind: OracleSquash) -> Vec<f64> {
    let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = match kind {
        OracleSquash::Ratio => n / (1.0 + n),
        OracleSquash::Exp => 1.0 - (-n).exp(),
        OracleSquash::Tanh => n.tanh(),
        OracleSquash::Identity => n,
    };
    s.iter().map(|x| k * x / n).collect()
}

fn softmax_row(logits: &[f64], leaky: bool) -> Vec<f64> {
    let mut all = logits.to_vec();
    if leaky {
        all.push(0.0);
    }
    let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = all.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e[..logits.len()].iter().map(|x| x / z).collect()
}

/// `votes[i][j]` is child i's vote for parent j; `child_probs[i]` its
/// existence probability.
pub fn route(
    votes: &[Vec<Vec<f64>>],
    child_probs: &[f64],
    iterations: usize,
    leaky: bool,
    amend: bool,
    squash: OracleSquash,
) -> OracleRoute {
    let h = votes.len();
    let n = votes[0].len();
    let d = votes[0][0].len();
    let mut b = vec![vec![0.0; n]; h];
    let mut result = None;
    for _ in 0..iterations {
        let mut c = vec![vec![0.0; n]; h];
        for i in 0..h {
            let row = softmax_row(&b[i], leaky);
            for j in 0..n {
                c[i][j] = if amend { child_probs[i] * row[j] } else { row[j] };
            }
        }
        let mut parents = vec![vec![0.0; d]; n];
        for j in 0..n {
            let mut s = vec![0.0; d];
            for i in 0..h {
                for k in 0..d {
                    s[k] += c[i][j] * votes[i][j][k];
                }
            }
            parents[j] = squash_vec(&s, squash);
        }
        let probs: Vec<f64> = parents.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        for i in 0..h {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += votes[i][j][k] * parents[j][k];
                }
                b[i][j] += dot;
            }
        }
        result = Some(OracleRoute { parents, probs, couplings: c });
    }
    result.expect("at least one iteration")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub exact_match_ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled counts over every (example, class) cell of the label matrix.
pub fn metrics(truth: &[BTreeSet<usize>], preds: &[BTreeSet<usize>], classes: usize) -> OracleMetrics {
    let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
    for e in 0..truth.len() {
        let mut all_match = true;
        for k in 0..classes {
            let t = truth[e].contains(&k);
            let p = preds[e].contains(&k);
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
            if t != p {
                all_match = false;
            }
        }
        if all_match {
            exact += 1;
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    OracleMetrics {
        tp,
        fp,
        fn_,
        exact_match_ratio: if truth.is_empty() { 0.0 } else { exact as f64 / truth.len() as f64 },
        precision,
        recall,
        f1,
    }
}
