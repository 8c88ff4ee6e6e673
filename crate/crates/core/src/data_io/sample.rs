use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::random::seeded;
use crate::tensor::{Shape, Tensor};

/// Per-channel input normalisation, applied to `[0, 1]` images.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;

/// Fractions accepted by [`few_shot_subset`].
pub const FEW_SHOT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.20, 0.30, 1.0];

/// Bitemporal sample. Images are `(1, 3, h, w)` in `[0, 1]`; the mask is
/// `(1, 1, h, w)` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Single-temporal sample used for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

fn check_raster(id: &str, image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    let (s, m) = (image.shape(), mask.shape());
    if s.n != 1 || s.c != 3 || m != Shape::new(1, 1, s.h, s.w) {
        return Err(Error::Data(format!("{id}: image {s} and mask {m} do not match")));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("{id}: mask is not binary")));
    }
    Ok(())
}

impl SamplePair {
    pub fn new(id: impl Into<String>, t1: Tensor<f32>, t2: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if t1.shape() != t2.shape() {
            return Err(Error::Data(format!("{id}: temporal images {} and {} differ", t1.shape(), t2.shape())));
        }
        check_raster(&id, &t1, &mask)?;
        Ok(Self { id, t1, t2, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape().h, self.mask.shape().w)
    }
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        check_raster(&id, &image, &mask)?;
        Ok(Self { id, image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape().h, self.mask.shape().w)
    }
}

/// Maps `[0, 1]` pixels to the network input range.
pub fn normalize_image(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v - NORM_MEAN) / NORM_STD)
}

/// Deterministic seeded subset of `items`, preserving their order. At least
/// one item is kept from a nonempty list.
pub fn few_shot_subset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !FEW_SHOT_FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "few-shot fraction {fraction} is not one of {FEW_SHOT_FRACTIONS:?}"
        )));
    }
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let keep = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len());
    let mut idx = sample(&mut seeded(seed), items.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}
