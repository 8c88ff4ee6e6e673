use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::sample::{Sample, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Label pixels at or above this 8-bit value are change.
pub const LABEL_THRESHOLD: u8 = 128;

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 255, 0];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// What [`write_prediction`] renders.
#[derive(Debug, Clone, Copy)]
pub enum Prediction<'a> {
    /// Probabilities or a binary mask; values `>= 0.5` are written as 255.
    Mask(&'a Tensor<f32>),
    /// Binary prediction against binary ground truth, coloured by outcome.
    Composite { pred: &'a Tensor<f32>, truth: &'a Tensor<f32> },
}

/// Reads an 8-bit image as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Reads an 8-bit label and binarises it at [`LABEL_THRESHOLD`].
pub fn read_label(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] >= LABEL_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

pub fn write_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_rgb", format!("expected one RGB image, got {s}")));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| to_u8(t.at(0, c, y as usize, x as usize))))
    });
    save(img.save(path), path)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(r: image::ImageResult<()>, path: &Path) -> Result<()> {
    r.map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn single_plane(t: &Tensor<f32>, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("write_prediction", format!("{what} must be (1, 1, h, w), got {s}")));
    }
    Ok((s.h, s.w))
}

/// Writes a prediction raster as PNG.
pub fn write_prediction(pred: Prediction<'_>, path: &Path) -> Result<()> {
    match pred {
        Prediction::Mask(m) => {
            let (h, w) = single_plane(m, "mask")?;
            if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
            }
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([if m.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
            });
            save(img.save(path), path)
        }
        Prediction::Composite { pred, truth } => {
            let (h, w) = single_plane(pred, "prediction")?;
            if truth.shape() != pred.shape() {
                return Err(Error::shape("write_prediction", format!("truth {} vs prediction {}", truth.shape(), pred.shape())));
            }
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb(match (pred.data()[i] >= 0.5, truth.data()[i] >= 0.5) {
                    (true, true) => TP_COLOR,
                    (true, false) => FP_COLOR,
                    (false, true) => FN_COLOR,
                    (false, false) => TN_COLOR,
                })
            });
            save(img.save(path), path)
        }
    }
}

/// Sorted `*.png` file names in `dir`; an absent directory is an error.
fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn counterpart(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Data(format!("{name}: missing counterpart {}", p.display())))
    }
}

fn stem(name: &str) -> String {
    name.rsplit_once('.').map_or(name, |(s, _)| s).to_string()
}

/// Loads `root/split/{A,B,label}/*.png` in lexicographic order.
pub fn load_cd_dataset(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let base = root.join(split);
    let (a, b, l) = (base.join("A"), base.join("B"), base.join("label"));
    let mut out = Vec::new();
    for name in png_names(&a)? {
        let t1 = read_rgb(&a.join(&name))?;
        let t2 = read_rgb(&counterpart(&b, &name)?)?;
        let mask = read_label(&counterpart(&l, &name)?)?;
        out.push(SamplePair::new(stem(&name), t1, t2, mask)?);
    }
    Ok(out)
}

/// Loads a single-temporal set from `root/split/{image,label}/*.png`.
pub fn load_single_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let base = root.join(split);
    let (img, l) = (base.join("image"), base.join("label"));
    let mut out = Vec::new();
    for name in png_names(&img)? {
        let image = read_rgb(&img.join(&name))?;
        let mask = read_label(&counterpart(&l, &name)?)?;
        out.push(Sample::new(stem(&name), image, mask)?);
    }
    Ok(out)
}

/// Writes pairs in the layout read by [`load_cd_dataset`].
pub fn write_cd_dataset(root: &Path, split: &str, pairs: &[SamplePair]) -> Result<()> {
    let base = root.join(split);
    for d in ["A", "B", "label"] {
        fs::create_dir_all(base.join(d))?;
    }
    for p in pairs {
        let name = format!("{}.png", p.id);
        write_rgb(&p.t1, &base.join("A").join(&name))?;
        write_rgb(&p.t2, &base.join("B").join(&name))?;
        write_prediction(Prediction::Mask(&p.mask), &base.join("label").join(&name))?;
    }
    Ok(())
}

/// Writes samples in the layout read by [`load_single_dataset`].
pub fn write_single_dataset(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let base = root.join(split);
    for d in ["image", "label"] {
        fs::create_dir_all(base.join(d))?;
    }
    for s in samples {
        let name = format!("{}.png", s.id);
        write_rgb(&s.image, &base.join("image").join(&name))?;
        write_prediction(Prediction::Mask(&s.mask), &base.join("label").join(&name))?;
    }
    Ok(())
}
