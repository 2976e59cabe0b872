//! Flat real-valued tensors with shape metadata.
//!
//! Every latent quantity in the pipeline (clean samples, noisy samples,
//! injected noise, score estimates, gradients) is a [`Latent`]. Shapes are
//! `[D]` for vector worlds and `[H, W]` for grayscale grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatent", into = "RawLatent")]
pub struct Latent {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawLatent {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawLatent> for Latent {
    type Error = Error;

    fn try_from(raw: RawLatent) -> Result<Self> {
        Latent::new(raw.data, raw.shape)
    }
}

impl From<Latent> for RawLatent {
    fn from(l: Latent) -> Self {
        RawLatent {
            shape: l.shape,
            data: l.data,
        }
    }
}

impl Latent {
    /// Builds a latent, checking that `shape` matches the data length and
    /// that every entry is finite.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidLatent(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidLatent(format!(
                "shape {shape:?} holds {n} entries but data has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidLatent(format!("entry {i} is not finite ({})", data[i])));
        }
        Ok(Self { data, shape })
    }

    /// A one-dimensional latent of shape `[data.len()]`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(H, W)` when the latent is a grid.
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Some((*h, *w)),
            _ => None,
        }
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn check_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, &self.shape));
        }
        Ok(())
    }

    /// Applies `f` elementwise and rejects non-finite output.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Latent> {
        Latent::new(self.data.iter().map(|&x| f(x)).collect(), self.shape.clone())
    }

    /// Elementwise combination of two equally shaped latents.
    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Latent::new(data, self.shape.clone())
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Latent> {
        self.map(|x| s * x)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Latent) -> Result<Latent> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Latent) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &Latent) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }
}
