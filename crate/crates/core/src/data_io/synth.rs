//! Synthetic bitemporal scenes: textured ground with rectangular
//! "buildings", some of which appear or disappear between the two dates.

use rand::Rng;

use super::sample::{Sample, SamplePair};
use crate::error::{Error, Result};
use crate::networks::SIZE_MULTIPLE;
use crate::random::{keyed, SeededRng};
use crate::tensor::{Shape, Tensor};

/// Largest accepted change density. Above this the non-overlapping
/// placement can no longer reach the requested area.
pub const MAX_CHANGE_DENSITY: f64 = 0.5;

const ROOFS: [[f32; 3]; 4] = [[0.78, 0.74, 0.70], [0.64, 0.32, 0.26], [0.56, 0.60, 0.68], [0.86, 0.83, 0.70]];

/// Half-open pixel rectangle `[y0, y0 + h) x [x0, x0 + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }

    /// True when the rectangles overlap or touch within `gap` pixels.
    fn near(&self, o: &Rect, gap: usize) -> bool {
        self.y0 < o.y0 + o.h + gap && o.y0 < self.y0 + self.h + gap && self.x0 < o.x0 + o.w + gap && o.x0 < self.x0 + self.w + gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub rect: Rect,
    pub roof: [f32; 3],
}

/// Per-channel affine colour shift applied to the second date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
}

impl Jitter {
    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let s = img.shape();
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / s.plane()) % s.c;
            *v = (*v * self.gain[c] + self.bias[c]).clamp(0.0, 1.0);
        }
        out
    }
}

/// One generated scene with the geometry that produced it.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pair: SamplePair,
    pub before: Vec<Building>,
    pub after: Vec<Building>,
    pub jitter: Jitter,
}

impl SynthSample {
    /// The first date with its building footprint, for pretraining.
    pub fn footprint_sample(&self) -> Sample {
        let (h, w) = self.pair.size();
        Sample {
            id: self.pair.id.clone(),
            image: self.pair.t1.clone(),
            mask: footprint(&self.before, h, w),
        }
    }
}

/// Generates `n` scenes of `size x size` pixels whose change masks cover
/// roughly `change_density` of each image.
pub fn synth_generate(seed: u64, n: usize, size: usize, change_density: f64) -> Result<Vec<SynthSample>> {
    if size == 0 || size % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    if !(0.0..=MAX_CHANGE_DENSITY).contains(&change_density) {
        return Err(Error::Config(format!("change density {change_density} outside [0, {MAX_CHANGE_DENSITY}]")));
    }
    (0..n).map(|i| scene(seed, i, size, change_density)).collect()
}

/// Pixels covered by any building, as a `(1, 1, h, w)` mask.
pub fn footprint(buildings: &[Building], h: usize, w: usize) -> Tensor<f32> {
    let mut m = Tensor::zeros(Shape::new(1, 1, h, w));
    for b in buildings {
        let r = b.rect;
        for y in r.y0..(r.y0 + r.h).min(h) {
            for x in r.x0..(r.x0 + r.w).min(w) {
                m.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    m
}

fn scene(seed: u64, index: usize, size: usize, density: f64) -> Result<SynthSample> {
    let mut rng = keyed(seed, &format!("synth/{index}"));
    let (min_side, max_side) = ((size / 16).max(2), (size / 4).max(3));
    let scale = (size * size) as f64 / (64.0 * 64.0);
    let mut placed: Vec<Rect> = Vec::new();

    let mut before = Vec::new();
    let mut after = Vec::new();
    let stable = ((rng.gen_range(2..=5) as f64) * scale).round().max(1.0) as usize;
    for _ in 0..stable {
        let (h, w) = (rng.gen_range(min_side..=max_side), rng.gen_range(min_side..=max_side));
        if let Some(r) = place(&mut rng, &mut placed, size, h, w) {
            let b = building(&mut rng, r);
            before.push(b);
            after.push(b);
        }
    }

    let target = density * (size * size) as f64;
    let mut changed = 0.0;
    let mut attempts = 0;
    while changed < target && attempts < 200 {
        attempts += 1;
        let remaining = target - changed;
        let (h, w) = if remaining >= (max_side * max_side) as f64 {
            (rng.gen_range(min_side..=max_side), rng.gen_range(min_side..=max_side))
        } else if remaining >= (min_side * min_side) as f64 / 2.0 {
            // size the last building to land near the target area
            let h = rng.gen_range(min_side..=max_side);
            let w = ((remaining / h as f64).round() as usize).clamp(min_side, max_side);
            (h, w)
        } else {
            break;
        };
        if let Some(r) = place(&mut rng, &mut placed, size, h, w) {
            changed += r.area() as f64;
            let b = building(&mut rng, r);
            if rng.gen_bool(0.5) {
                before.push(b);
            } else {
                after.push(b);
            }
        }
    }

    let ground = ground(&mut rng, size);
    let jitter = Jitter {
        gain: [0; 3].map(|_| rng.gen_range(0.9..1.1)),
        bias: [0; 3].map(|_| rng.gen_range(-0.05..0.05)),
    };
    let t1 = render(&ground, &before);
    let t2 = jitter.apply(&render(&ground, &after));
    let f1 = footprint(&before, size, size);
    let f2 = footprint(&after, size, size);
    let mask = Tensor::from_vec(
        f1.shape(),
        f1.data().iter().zip(f2.data()).map(|(&a, &b)| if a != b { 1.0 } else { 0.0 }).collect(),
    )?;
    let pair = SamplePair::new(format!("synth_{index:05}"), t1, t2, mask)?;
    Ok(SynthSample {
        pair,
        before,
        after,
        jitter,
    })
}

fn place(rng: &mut SeededRng, placed: &mut Vec<Rect>, size: usize, h: usize, w: usize) -> Option<Rect> {
    for _ in 0..50 {
        let r = Rect {
            y0: rng.gen_range(0..=size - h),
            x0: rng.gen_range(0..=size - w),
            h,
            w,
        };
        // a one-pixel gap keeps neighbouring outlines distinct
        if !placed.iter().any(|p| p.near(&r, 1)) {
            placed.push(r);
            return Some(r);
        }
    }
    None
}

fn building(rng: &mut SeededRng, rect: Rect) -> Building {
    let base = ROOFS[rng.gen_range(0..ROOFS.len())];
    Building {
        rect,
        roof: base.map(|c| (c + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0)),
    }
}

/// Vegetation-like texture: a few low-frequency waves plus pixel noise.
fn ground(rng: &mut SeededRng, size: usize) -> Tensor<f32> {
    let base = [0.30 + rng.gen_range(-0.04..0.04), 0.36 + rng.gen_range(-0.04..0.04), 0.22 + rng.gen_range(-0.04..0.04)];
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..std::f32::consts::TAU)))
        .collect();
    let mut out = Tensor::zeros(Shape::new(1, 3, size, size));
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let wave: f32 = waves.iter().map(|&(fy, fx, ph)| (fy * y as f32 + fx * x as f32 + ph).sin()).sum::<f32>() * 0.02;
            let noise = rng.gen_range(-0.03..0.03f32);
            for (c, b) in base.iter().enumerate() {
                out.data_mut()[c * plane + y * size + x] = (b + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Draws buildings over the ground, each with a darker one-pixel outline.
fn render(ground: &Tensor<f32>, buildings: &[Building]) -> Tensor<f32> {
    let mut out = ground.clone();
    let (h, w) = (ground.shape().h, ground.shape().w);
    for b in buildings {
        let r = b.rect;
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                let edge = y == r.y0 || x == r.x0 || y + 1 == r.y0 + r.h || x + 1 == r.x0 + r.w;
                for c in 0..3 {
                    out.data_mut()[(c * h + y) * w + x] = if edge { b.roof[c] * 0.7 } else { b.roof[c] };
                }
            }
        }
    }
    out
}
