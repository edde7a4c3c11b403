use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::tokenize;
use crate::error::{Error, Result};

/// A tokenized document with one or more category labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub labels: BTreeSet<String>,
    /// 1-based source line, 0 when built in memory.
    pub line: usize,
}

impl LabeledExample {
    pub fn new<I, S>(tokens: Vec<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LabeledExample {
            tokens,
            labels: labels.into_iter().map(Into::into).collect(),
            line: 0,
        }
    }

    pub fn is_multi_label(&self) -> bool {
        self.labels.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Sorted union of all labels.
    pub categories: Vec<String>,
}

impl DatasetSplits {
    pub fn from_splits(
        train: Vec<LabeledExample>,
        dev: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
    ) -> Self {
        let categories: BTreeSet<String> = train
            .iter()
            .chain(&dev)
            .chain(&test)
            .flat_map(|e| e.labels.iter().cloned())
            .collect();
        DatasetSplits { train, dev, test, categories: categories.into_iter().collect() }
    }

    /// Single-to-multi-label transfer: training and dev keep only
    /// single-label documents; the test split is untouched. Returns the
    /// number of documents dropped.
    pub fn restrict_to_single_label_training(&mut self) -> usize {
        let before = self.train.len() + self.dev.len();
        self.train.retain(|e| !e.is_multi_label());
        self.dev.retain(|e| !e.is_multi_label());
        before - self.train.len() - self.dev.len()
    }
}

/// Parses one TSV split: `<labels>\t<text>` per line, labels comma-separated.
/// Blank lines are skipped.
pub fn load_split(path: &Path) -> Result<Vec<LabeledExample>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&content, path)
}

fn parse_split(content: &str, path: &Path) -> Result<Vec<LabeledExample>> {
    let fmt_err = |line: usize, msg: &str| Error::Format {
        path: PathBuf::from(path),
        line,
        msg: msg.to_string(),
    };
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (labels, text) = line
            .split_once('\t')
            .ok_or_else(|| fmt_err(line_no, "missing tab between labels and text"))?;
        let labels: BTreeSet<String> = labels
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if labels.is_empty() {
            return Err(fmt_err(line_no, "empty label field"));
        }
        out.push(LabeledExample { tokens: tokenize(text), labels, line: line_no });
    }
    Ok(out)
}

/// Loads `train.tsv`, `dev.tsv` and `test.tsv` from `dir`.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let train = load_split(&dir.join("train.tsv"))?;
    let dev = load_split(&dir.join("dev.tsv"))?;
    let test = load_split(&dir.join("test.tsv"))?;
    Ok(DatasetSplits::from_splits(train, dev, test))
}
