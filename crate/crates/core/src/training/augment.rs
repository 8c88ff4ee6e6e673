//! Paired augmentation. Geometric transforms are drawn once and applied to
//! every raster of a sample; photometric ones are drawn per image.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_io::{Sample, SamplePair};
use crate::error::{Error, Result};
use crate::random::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Photometric {
    Contrast,
    Gamma,
    Emboss,
    Noise,
    HueSatBrightness,
    MotionBlur,
}

impl Photometric {
    pub const ALL: [Photometric; 6] = [
        Photometric::Contrast,
        Photometric::Gamma,
        Photometric::Emboss,
        Photometric::Noise,
        Photometric::HueSatBrightness,
        Photometric::MotionBlur,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Square random crop; `None` keeps the full image.
    pub crop: Option<usize>,
    /// Probability of each of the horizontal and vertical flips.
    pub flip_p: f64,
    /// Probability of one random rotation/translation/scale.
    pub geometric_p: f64,
    /// Per-image probability of one photometric transform from `photometric`.
    pub photometric_p: f64,
    pub temporal_swap_p: f64,
    pub photometric: Vec<Photometric>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop: Some(256),
            flip_p: 0.5,
            geometric_p: 0.3,
            photometric_p: 0.5,
            temporal_swap_p: 0.5,
            photometric: Photometric::ALL.to_vec(),
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip_p: 0.0,
            geometric_p: 0.0,
            photometric_p: 0.0,
            temporal_swap_p: 0.0,
            photometric: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("geometric_p", self.geometric_p),
            ("photometric_p", self.photometric_p),
            ("temporal_swap_p", self.temporal_swap_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if self.photometric_p > 0.0 && self.photometric.is_empty() {
            return Err(Error::Config("photometric_p > 0 with no photometric transforms listed".into()));
        }
        Ok(())
    }
}

pub fn augment(pair: &SamplePair, cfg: &AugmentationConfig, rng: &mut SeededRng) -> Result<SamplePair> {
    if pair.t1.shape() != pair.t2.shape() {
        return Err(Error::shape("augment", format!("{}: temporal images differ", pair.id)));
    }
    let mut rasters = vec![pair.t1.clone(), pair.t2.clone()];
    let mask = geometric(&mut rasters, &pair.mask, cfg, rng)?;
    let mut t2 = rasters.pop().expect("two images");
    let mut t1 = rasters.pop().expect("two images");
    photometric(&mut t1, cfg, rng);
    photometric(&mut t2, cfg, rng);
    if rng.gen_bool(cfg.temporal_swap_p) {
        std::mem::swap(&mut t1, &mut t2);
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        t1,
        t2,
        mask,
    })
}

/// Single-image variant; temporal swap does not apply.
pub fn augment_single(sample: &Sample, cfg: &AugmentationConfig, rng: &mut SeededRng) -> Result<Sample> {
    let mut rasters = vec![sample.image.clone()];
    let mask = geometric(&mut rasters, &sample.mask, cfg, rng)?;
    let mut image = rasters.pop().expect("one image");
    photometric(&mut image, cfg, rng);
    Ok(Sample {
        id: sample.id.clone(),
        image,
        mask,
    })
}

fn geometric(images: &mut [Tensor<f32>], mask: &Tensor<f32>, cfg: &AugmentationConfig, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (h, w) = (mask.shape().h, mask.shape().w);
    for img in images.iter() {
        if (img.shape().h, img.shape().w) != (h, w) {
            return Err(Error::shape("augment", format!("image {} vs mask {}", img.shape(), mask.shape())));
        }
    }
    let mut mask = mask.clone();
    if let Some(c) = cfg.crop {
        if c > h || c > w {
            return Err(Error::shape("augment", format!("crop {c} larger than {h}x{w}")));
        }
        let (y0, x0) = (rng.gen_range(0..=h - c), rng.gen_range(0..=w - c));
        for img in images.iter_mut() {
            *img = crop(img, y0, x0, c);
        }
        mask = crop(&mask, y0, x0, c);
    }
    if rng.gen_bool(cfg.flip_p) {
        images.iter_mut().for_each(|t| *t = hflip(t));
        mask = hflip(&mask);
    }
    if rng.gen_bool(cfg.flip_p) {
        images.iter_mut().for_each(|t| *t = vflip(t));
        mask = vflip(&mask);
    }
    if rng.gen_bool(cfg.geometric_p) {
        let a = Affine {
            angle: rng.gen_range(-30f32..30.0).to_radians(),
            scale: rng.gen_range(0.9..1.1),
            dy: rng.gen_range(-0.1..0.1),
            dx: rng.gen_range(-0.1..0.1),
        };
        images.iter_mut().for_each(|t| *t = warp(t, &a, false));
        mask = warp(&mask, &a, true);
    }
    Ok(mask)
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, t.shape().c, size, size), |[_, c, y, x]| t.at(0, c, y0 + y, x0 + x))
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, y, w - 1 - x))
}

pub fn vflip(t: &Tensor<f32>) -> Tensor<f32> {
    let h = t.shape().h;
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, h - 1 - y, x))
}

/// Rotation and scale about the image centre, then a shift given as a
/// fraction of the image size.
struct Affine {
    angle: f32,
    scale: f32,
    dy: f32,
    dx: f32,
}

/// Inverse-maps every output pixel; samples outside the source are zero.
/// Masks use nearest neighbour so they stay binary.
fn warp(t: &Tensor<f32>, a: &Affine, nearest: bool) -> Tensor<f32> {
    let s = t.shape();
    let (cy, cx) = ((s.h as f32 - 1.0) / 2.0, (s.w as f32 - 1.0) / 2.0);
    let (sin, cos) = a.angle.sin_cos();
    let mut out = Tensor::zeros(s);
    for y in 0..s.h {
        for x in 0..s.w {
            let py = y as f32 - cy - a.dy * s.h as f32;
            let px = x as f32 - cx - a.dx * s.w as f32;
            let sy = (cos * py - sin * px) / a.scale + cy;
            let sx = (sin * py + cos * px) / a.scale + cx;
            for c in 0..s.c {
                let v = if nearest {
                    let (ry, rx) = (sy.round(), sx.round());
                    if ry < 0.0 || rx < 0.0 || ry > (s.h - 1) as f32 || rx > (s.w - 1) as f32 {
                        0.0
                    } else {
                        t.at(0, c, ry as usize, rx as usize)
                    }
                } else {
                    bilinear_sample(t, c, sy, sx)
                };
                let i = out.index(0, c, y, x);
                out.data_mut()[i] = v;
            }
        }
    }
    out
}

fn bilinear_sample(t: &Tensor<f32>, c: usize, y: f32, x: f32) -> f32 {
    let s = t.shape();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f32, xx: f32| {
        if yy < 0.0 || xx < 0.0 || yy >= s.h as f32 || xx >= s.w as f32 {
            0.0
        } else {
            t.at(0, c, yy as usize, xx as usize)
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
    let bot = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

fn photometric(img: &mut Tensor<f32>, cfg: &AugmentationConfig, rng: &mut SeededRng) {
    if cfg.photometric.is_empty() || !rng.gen_bool(cfg.photometric_p) {
        return;
    }
    let op = cfg.photometric[rng.gen_range(0..cfg.photometric.len())];
    apply_photometric(img, op, rng);
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn apply_photometric(img: &mut Tensor<f32>, op: Photometric, rng: &mut SeededRng) {
    let s = img.shape();
    let plane = s.plane();
    match op {
        Photometric::Contrast => {
            let k = rng.gen_range(0.75..1.25f32);
            let mean = img.mean() as f32;
            img.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
        }
        Photometric::Gamma => {
            let g = rng.gen_range(0.75..1.33f32);
            img.data_mut().iter_mut().for_each(|v| *v = v.max(0.0).powf(g));
        }
        Photometric::Emboss => {
            // conventional 3x3 emboss kernel, blended with the original
            const K: [[f32; 3]; 3] = [[-2.0, -1.0, 0.0], [-1.0, 1.0, 1.0], [0.0, 1.0, 2.0]];
            let alpha = rng.gen_range(0.2..0.5f32);
            let embossed = convolve3(img, &K);
            for (v, e) in img.data_mut().iter_mut().zip(embossed.data()) {
                *v = (1.0 - alpha) * *v + alpha * e.clamp(0.0, 1.0);
            }
        }
        Photometric::Noise => {
            let sigma = rng.gen_range(0.01..0.04f32);
            let n = Normal::new(0.0f32, sigma).expect("positive sigma");
            img.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
        }
        Photometric::HueSatBrightness => {
            let brightness = rng.gen_range(-0.1..0.1f32);
            let sat = rng.gen_range(0.8..1.2f32);
            let hue = rng.gen_range(-0.2..0.2f32);
            // hue: rotation about the grey axis (Rodrigues with unit (1,1,1)/sqrt 3)
            let (sn, cs) = hue.sin_cos();
            let k = (1.0 - cs) / 3.0;
            let r3 = sn / 3f32.sqrt();
            let rot = [[cs + k, k - r3, k + r3], [k + r3, cs + k, k - r3], [k - r3, k + r3, cs + k]];
            let d = img.data_mut();
            for i in 0..plane {
                let px = [d[i], d[plane + i], d[2 * plane + i]];
                let grey = (px[0] + px[1] + px[2]) / 3.0;
                for c in 0..3 {
                    let rotated = rot[c][0] * px[0] + rot[c][1] * px[1] + rot[c][2] * px[2];
                    d[c * plane + i] = grey + (rotated - grey) * sat + brightness;
                }
            }
        }
        Photometric::MotionBlur => {
            let third = 1.0 / 3.0;
            let k = match rng.gen_range(0..4) {
                0 => [[0.0, 0.0, 0.0], [third, third, third], [0.0, 0.0, 0.0]],
                1 => [[0.0, third, 0.0], [0.0, third, 0.0], [0.0, third, 0.0]],
                2 => [[third, 0.0, 0.0], [0.0, third, 0.0], [0.0, 0.0, third]],
                _ => [[0.0, 0.0, third], [0.0, third, 0.0], [third, 0.0, 0.0]],
            };
            *img = convolve3(img, &k);
        }
    }
}

/// Per-channel 3x3 filter with edge replication.
fn convolve3(img: &Tensor<f32>, k: &[[f32; 3]; 3]) -> Tensor<f32> {
    let s = img.shape();
    Tensor::from_fn(s, |[n, c, y, x]| {
        let mut acc = 0.0;
        for (i, row) in k.iter().enumerate() {
            for (j, &kv) in row.iter().enumerate() {
                let yy = (y + i).saturating_sub(1).min(s.h - 1);
                let xx = (x + j).saturating_sub(1).min(s.w - 1);
                acc += kv * img.at(n, c, yy, xx);
            }
        }
        acc
    })
}
