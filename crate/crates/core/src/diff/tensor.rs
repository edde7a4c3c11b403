use std::fmt;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a graph. Implemented for `f32` and `f64`;
/// the choice is made once per graph (and per model).
pub trait Real:
    Float
    + FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: u8;
    const BYTES: usize;

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("float conversion")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Whole-graph precision setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Initialization scheme for [`Tensor::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))) with fans
    /// taken from the last two extents.
    GlorotUniform { seed: u64 },
    /// Glorot bound from explicit fans, for filters whose receptive field
    /// spans more than the last two extents.
    GlorotFans { fan_in: usize, fan_out: usize, seed: u64 },
    Uniform { lo: f64, hi: f64, seed: u64 },
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Constant(c) => vec![F::lit(c); n],
            Init::GlorotUniform { seed } => {
                let (fan_in, fan_out) = glorot_fans(shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                sample_uniform(n, -limit, limit, seed)
            }
            Init::GlorotFans { fan_in, fan_out, seed } => {
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                sample_uniform(n, -limit, limit, seed)
            }
            Init::Uniform { lo, hi, seed } => {
                if lo.is_nan() || hi.is_nan() || lo >= hi {
                    return Err(Error::Contract(format!("uniform bounds {lo} >= {hi}")));
                }
                sample_uniform(n, lo, hi, seed)
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| F::lit(x)).collect())
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of range {n}");
                acc * n + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::lit(x.as_f64()))
                .collect(),
        }
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape list".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
    }
    Ok(())
}

fn glorot_fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        _ => {
            let fan_out = shape[shape.len() - 1];
            let fan_in = shape[shape.len() - 2];
            (fan_in, fan_out)
        }
    }
}

fn sample_uniform<F: Real>(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| F::lit(rng.gen_range(lo..hi))).collect()
}
