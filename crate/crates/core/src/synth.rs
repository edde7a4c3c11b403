//! Seeded keyword corpora: each class owns a handful of keywords, sentences
//! are filler words with one or more class keywords mixed in.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{DatasetSplits, LabeledExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub keywords_per_class: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Keyword occurrences per sentence, inclusive range.
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            keywords_per_class: 4,
            filler_words: 40,
            min_len: 6,
            max_len: 20,
            min_keywords: 1,
            max_keywords: 3,
            seed: 1,
        }
    }
}

pub fn class_name(k: usize) -> String {
    format!("c{k}")
}

pub fn keyword(class: usize, i: usize) -> String {
    format!("k{class}x{i}")
}

fn filler(i: usize) -> String {
    format!("w{i}")
}

/// Sentence generator drawing from one seeded stream.
#[derive(Debug, Clone)]
pub struct KeywordCorpus {
    spec: SynthSpec,
    rng: ChaCha8Rng,
}

impl KeywordCorpus {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        if spec.classes < 1 || spec.keywords_per_class < 1 || spec.filler_words < 1 {
            return Err(Error::Config("synthetic corpus needs classes, keywords and filler words".into()));
        }
        if spec.min_keywords < 1 || spec.min_keywords > spec.max_keywords {
            return Err(Error::Config("keyword count range is empty".into()));
        }
        if spec.min_len < spec.max_keywords || spec.min_len > spec.max_len {
            return Err(Error::Config(format!(
                "sentence length range {}..={} cannot hold {} keywords",
                spec.min_len, spec.max_len, spec.max_keywords
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(KeywordCorpus { spec, rng })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn categories(&self) -> Vec<String> {
        (0..self.spec.classes).map(class_name).collect()
    }

    pub fn sentence_tokens(&mut self, class: usize) -> Vec<String> {
        let s = &self.spec;
        let len = self.rng.gen_range(s.min_len..=s.max_len);
        let n_kw = self.rng.gen_range(s.min_keywords..=s.max_keywords);
        let mut tokens: Vec<String> = (0..len).map(|_| filler(self.rng.gen_range(0..s.filler_words))).collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut self.rng);
        for &slot in slots.iter().take(n_kw) {
            tokens[slot] = keyword(class, self.rng.gen_range(0..s.keywords_per_class));
        }
        tokens
    }

    /// `n` single-label sentences with classes cycling in order.
    pub fn single_label(&mut self, n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let class = i % self.spec.classes;
                LabeledExample::new(self.sentence_tokens(class), [class_name(class)])
            })
            .collect()
    }

    /// `n` two-label documents, each the concatenation of sentences from two
    /// distinct classes. Each half is at most `half_max_len` tokens long.
    pub fn two_label(&mut self, n: usize, half_max_len: usize) -> Result<Vec<LabeledExample>> {
        if self.spec.classes < 2 {
            return Err(Error::Config("two-label documents need at least two classes".into()));
        }
        if half_max_len < self.spec.min_len {
            return Err(Error::Config(format!(
                "half length {half_max_len} is below the minimum sentence length {}",
                self.spec.min_len
            )));
        }
        let saved = self.spec.max_len;
        self.spec.max_len = half_max_len.min(saved);
        let docs = (0..n)
            .map(|_| {
                let a = self.rng.gen_range(0..self.spec.classes);
                let b = (a + self.rng.gen_range(1..self.spec.classes)) % self.spec.classes;
                let mut tokens = self.sentence_tokens(a);
                tokens.extend(self.sentence_tokens(b));
                LabeledExample::new(tokens, [class_name(a), class_name(b)])
            })
            .collect();
        self.spec.max_len = saved;
        Ok(docs)
    }

    /// Single-label train/dev/test splits.
    pub fn splits(&mut self, train: usize, dev: usize, test: usize) -> DatasetSplits {
        let tr = self.single_label(train);
        let dv = self.single_label(dev);
        let te = self.single_label(test);
        let mut s = DatasetSplits::from_splits(tr, dv, te);
        s.categories = self.categories();
        s
    }

    /// Single-label train/dev, two-label test whose documents fit in
    /// `spec.max_len` tokens.
    pub fn transfer_splits(&mut self, train: usize, dev: usize, test: usize) -> Result<DatasetSplits> {
        let tr = self.single_label(train);
        let dv = self.single_label(dev);
        let te = self.two_label(test, self.spec.max_len / 2)?;
        let mut s = DatasetSplits::from_splits(tr, dv, te);
        s.categories = self.categories();
        Ok(s)
    }
}
