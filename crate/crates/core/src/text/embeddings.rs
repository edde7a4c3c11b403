use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Vocabulary, PAD_INDEX};
use crate::diff::{Real, Tensor};
use crate::error::{Error, Result};

/// Bound of the uniform distribution used for words without a pretrained vector.
pub const OOV_RANGE: f64 = 0.25;

/// Word vectors indexed by vocabulary position. Row 0 (padding) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F: Real> {
    pub weights: Tensor<F>,
    pub trainable: bool,
}

impl<F: Real> EmbeddingTable<F> {
    /// Every non-padding row drawn from U(-0.25, 0.25).
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![None; vocab_size];
        fill_random(&mut rows, dim, &mut rng);
        Self::from_rows(rows, dim)
    }

    fn from_rows(rows: Vec<Option<Vec<f64>>>, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.into_iter().enumerate() {
            match row {
                Some(r) if i != PAD_INDEX => data.extend(r.into_iter().map(F::lit)),
                _ => data.extend(std::iter::repeat_n(F::zero(), dim)),
            }
        }
        let n = data.len() / dim.max(1);
        Ok(EmbeddingTable { weights: Tensor::from_vec(&[n, dim], data)?, trainable: false })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn row(&self, index: usize) -> &[F] {
        let d = self.dim();
        &self.weights.data()[index * d..(index + 1) * d]
    }
}

fn fill_random(rows: &mut [Option<Vec<f64>>], dim: usize, rng: &mut ChaCha8Rng) {
    for (i, row) in rows.iter_mut().enumerate() {
        if i == PAD_INDEX || row.is_some() {
            continue;
        }
        *row = Some((0..dim).map(|_| rng.gen_range(-OOV_RANGE..OOV_RANGE)).collect());
    }
}

/// Reads a word2vec text file (`<count> <dim>` header, then
/// `<word> <dim floats>` lines). Vocabulary words missing from the file
/// get U(-0.25, 0.25) rows drawn in index order from `seed`.
pub fn load_embeddings<F: Real>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable<F>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |line: usize, msg: String| Error::Format { path: PathBuf::from(path), line, msg };

    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let file_dim = match fields.as_slice() {
        [count, d] => {
            count
                .parse::<usize>()
                .map_err(|_| fmt_err(1, format!("bad word count {count:?}")))?;
            d.parse::<usize>()
                .map_err(|_| fmt_err(1, format!("bad dimension {d:?}")))?
        }
        _ => return Err(fmt_err(1, format!("expected \"<count> <dim>\", got {header:?}"))),
    };
    if file_dim != dim {
        return Err(Error::Config(format!(
            "embedding file dimension {file_dim} does not match configured size {dim}"
        )));
    }

    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|p| !p.is_empty());
        let word = parts.next().ok_or_else(|| fmt_err(line_no, "missing word".into()))?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| fmt_err(line_no, format!("bad float {p:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(fmt_err(line_no, format!("expected {dim} values, got {}", values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(fmt_err(line_no, "non-finite value".into()));
        }
        if !vocab.contains(word) {
            continue;
        }
        let idx = vocab.lookup(word);
        if rows[idx].is_none() {
            rows[idx] = Some(values);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_random(&mut rows, dim, &mut rng);
    EmbeddingTable::from_rows(rows, dim)
}
