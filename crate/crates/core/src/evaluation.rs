//! Change-class metrics and tiled evaluation.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data_io::{normalize_image, Checkpoint, Sample, SamplePair};
use crate::error::{Error, Result};
use crate::networks::{infer, Mode, ModelGraph, SIZE_MULTIPLE};
use crate::ops::sigmoid;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_TILE: usize = 256;

/// Pixel counts with change as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds every pixel of two equally shaped binary masks.
    pub fn accumulate(&mut self, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape("accumulate", format!("prediction {} vs truth {}", pred.shape(), truth.shape())));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.add_pixel(binary(p)?, binary(t)?);
        }
        Ok(())
    }

    fn add_pixel(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

fn binary(v: f32) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::InvalidArgument(format!("mask value {v} is not binary")))
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "precision {:.4} recall {:.4} f1 {:.4}", self.precision, self.recall, self.f1)?;
        if self.degenerate {
            write!(f, " (degenerate)")?;
        }
        Ok(())
    }
}

pub fn metrics(c: ConfusionCounts) -> MetricReport {
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MetricReport {
        precision,
        recall,
        f1,
        counts: c,
        degenerate: p.is_none() || r.is_none() || precision + recall == 0.0,
    }
}

/// `prob >= threshold` as a `{0, 1}` mask.
pub fn binarize(prob: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    if prob.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    Ok(prob.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

fn pad_to(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[n, c, y, x]| if y < s.h && x < s.w { t.at(n, c, y, x) } else { 0.0 })
}

fn tile_of(t: &Tensor<f32>, y0: usize, x0: usize, tile: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, tile, tile), |[n, c, y, x]| t.at(n, c, y0 + y, x0 + x))
}

/// Change probability of the fused head for `[0, 1]` images, inferred tile
/// by tile. Inputs are zero-padded (after normalisation) up to whole tiles
/// and the result is cropped back. `t2` is required exactly for SChanger.
pub fn predict_probs(g: &ModelGraph, ckpt: &Checkpoint, t1: &Tensor<f32>, t2: Option<&Tensor<f32>>, tile: usize) -> Result<Tensor<f32>> {
    if tile == 0 || tile % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!("tile {tile} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    let s = t1.shape();
    if s.n != 1 {
        return Err(Error::shape("predict", format!("one image at a time, got {s}")));
    }
    if let Some(t2) = t2.filter(|t| t.shape() != s) {
        return Err(Error::shape("predict", format!("temporal images {s} and {} differ", t2.shape())));
    }
    let (hp, wp) = (s.h.div_ceil(tile) * tile, s.w.div_ceil(tile) * tile);
    let x1 = pad_to(&normalize_image(t1), hp, wp);
    let x2 = t2.map(|t| pad_to(&normalize_image(t), hp, wp));
    let mut full = Tensor::zeros(Shape::new(1, 1, hp, wp));
    for y0 in (0..hp).step_by(tile) {
        for x0 in (0..wp).step_by(tile) {
            let a = tile_of(&x1, y0, x0, tile);
            let b = x2.as_ref().map(|x| tile_of(x, y0, x0, tile));
            let outs = infer(g, ckpt, &a, b.as_ref())?;
            let fused = outs.last().expect("six heads");
            for y in 0..tile {
                for x in 0..tile {
                    let i = full.index(0, 0, y0 + y, x0 + x);
                    full.data_mut()[i] = sigmoid(fused.at(0, 0, y, x));
                }
            }
        }
    }
    Ok(crop_top_left(&full, s.h, s.w))
}

fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| t.at(0, 0, y, x))
}

#[derive(Debug, Clone, Copy)]
pub enum EvalData<'a> {
    Pairs(&'a [SamplePair]),
    Single(&'a [Sample]),
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub evaluated: usize,
    /// Samples that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Scores the fused head over a dataset with pixel counts pooled across all
/// samples.
pub fn evaluate(g: &ModelGraph, ckpt: &Checkpoint, data: EvalData<'_>, tile: usize, threshold: f32) -> Result<EvalReport> {
    g.check(ckpt)?;
    let items: Vec<(&str, &Tensor<f32>, Option<&Tensor<f32>>, &Tensor<f32>)> = match (data, g.mode) {
        (EvalData::Pairs(p), Mode::Schanger) => p.iter().map(|s| (s.id.as_str(), &s.t1, Some(&s.t2), &s.mask)).collect(),
        (EvalData::Single(p), Mode::Spnet) => p.iter().map(|s| (s.id.as_str(), &s.image, None, &s.mask)).collect(),
        _ => return Err(Error::Config(format!("dataset kind does not match the {} graph", g.mode.name()))),
    };
    let mut counts = ConfusionCounts::default();
    let mut skipped = Vec::new();
    let mut evaluated = 0;
    for (id, t1, t2, mask) in items {
        let scored = predict_probs(g, ckpt, t1, t2, tile).and_then(|p| {
            let mut c = ConfusionCounts::default();
            c.accumulate(&binarize(&p, threshold)?, mask)?;
            Ok(c)
        });
        match scored {
            Ok(c) => {
                counts += c;
                evaluated += 1;
            }
            Err(e @ (Error::Shape { .. } | Error::InvalidArgument(_) | Error::NonFinite { .. })) => {
                eprintln!("warning: skipping {id}: {e}");
                skipped.push((id.to_string(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        metrics: metrics(counts),
        evaluated,
        skipped,
    })
}
