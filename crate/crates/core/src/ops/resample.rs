use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// 2x2 windows, stride 2. Input height and width must be even.
    MaxPool2,
    /// Half-pixel-centre bilinear interpolation (`align_corners = false`).
    Bilinear,
}

/// Resizes `x`. For `MaxPool2` the target must be half the input size.
pub fn resample<T: Real>(tape: &mut Tape<T>, x: Var, mode: Resample, target: (usize, usize)) -> Result<Var> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidArgument(format!("resample target {target:?} is empty")));
    }
    match mode {
        Resample::MaxPool2 => {
            let s = tape.shape(x);
            if (s.h / 2, s.w / 2) != target {
                return Err(Error::shape("maxpool2", format!("target {target:?} for input {s}")));
            }
            maxpool2(tape, x)
        }
        Resample::Bilinear => bilinear(tape, x, target),
    }
}

pub fn maxpool2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape("maxpool2", format!("spatial dims of {s} must be even and non-zero")));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out = Shape::new(s.n, s.c, oh, ow);
    let xv = tape.rc(x);
    let mut y = Tensor::zeros(out);
    // flat input index of each window maximum
    let mut arg = vec![0u32; out.numel()];
    for plane in 0..s.n * s.c {
        let xs = &xv.data()[plane * s.h * s.w..];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = plane * s.h * s.w + 2 * i * s.w + 2 * j;
                let mut bv = xs[2 * i * s.w + 2 * j];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * i + di) * s.w + 2 * j + dj;
                    if xs[idx] > bv {
                        bv = xs[idx];
                        best = plane * s.h * s.w + idx;
                    }
                }
                let o = (plane * oh + i) * ow + j;
                y.data_mut()[o] = bv;
                arg[o] = best as u32;
            }
        }
    }
    tape.record("maxpool2", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            for (&a, &g) in arg.iter().zip(gy.data()) {
                gx[a as usize] += g;
            }
        }
    })
}

/// Per-output-coordinate source taps `(lo, hi, weight_hi)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear<T: Real>(tape: &mut Tape<T>, x: Var, target: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x);
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("bilinear", format!("empty input {s}")));
    }
    let (oh, ow) = target;
    let out = Shape::new(s.n, s.c, oh, ow);
    let xv = tape.rc(x);
    if (oh, ow) == (s.h, s.w) {
        let y = (*xv).clone();
        return tape.record("bilinear", y, &[x], move |gy, sink| sink.add(x, gy.clone()));
    }
    let th: Vec<(usize, usize, T)> = taps(s.h, oh).into_iter().map(|(a, b, f)| (a, b, T::from_f64(f))).collect();
    let tw: Vec<(usize, usize, T)> = taps(s.w, ow).into_iter().map(|(a, b, f)| (a, b, T::from_f64(f))).collect();
    let mut y = Tensor::zeros(out);
    let one = T::one();
    for plane in 0..s.n * s.c {
        let xs = &xv.data()[plane * s.h * s.w..][..s.h * s.w];
        let ys = &mut y.data_mut()[plane * oh * ow..][..oh * ow];
        for (i, &(h0, h1, fh)) in th.iter().enumerate() {
            for (j, &(w0, w1, fw)) in tw.iter().enumerate() {
                let top = xs[h0 * s.w + w0] * (one - fw) + xs[h0 * s.w + w1] * fw;
                let bot = xs[h1 * s.w + w0] * (one - fw) + xs[h1 * s.w + w1] * fw;
                ys[i * ow + j] = top * (one - fh) + bot * fh;
            }
        }
    }
    tape.record("bilinear", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            for plane in 0..s.n * s.c {
                let gxs = &mut gx[plane * s.h * s.w..][..s.h * s.w];
                let gys = &gy.data()[plane * oh * ow..][..oh * ow];
                for (i, &(h0, h1, fh)) in th.iter().enumerate() {
                    for (j, &(w0, w1, fw)) in tw.iter().enumerate() {
                        let g = gys[i * ow + j];
                        let gt = g * (one - fh);
                        let gb = g * fh;
                        gxs[h0 * s.w + w0] += gt * (one - fw);
                        gxs[h0 * s.w + w1] += gt * fw;
                        gxs[h1 * s.w + w0] += gb * (one - fw);
                        gxs[h1 * s.w + w1] += gb * fw;
                    }
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, mode: Resample, target: (usize, usize)) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let y = resample(&mut tape, v, mode, target)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(run(x, Resample::MaxPool2, (1, 1)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let x = Tensor::zeros(Shape::new(1, 1, 3, 4));
        assert!(run(x, Resample::MaxPool2, (1, 2)).is_err());
    }

    #[test]
    fn bilinear_constant() {
        let x = Tensor::full(Shape::new(1, 2, 3, 5), 1.75);
        let y = run(x, Resample::Bilinear, (7, 4)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 7, 4));
        assert!(y.data().iter().all(|v| (v - 1.75).abs() < 1e-12));
    }

    #[test]
    fn bilinear_row_against_scalar_oracle() {
        // Half-pixel centres: output k samples source (k + 0.5) / 2 - 0.5,
        // clamped at 0: -0.25 -> 0, 0.25, 0.75, 1.25 -> clamped to the last tap.
        fn oracle(src: f64, vals: &[f64]) -> f64 {
            let s = src.max(0.0);
            let lo = (s.floor() as usize).min(vals.len() - 1);
            let hi = (lo + 1).min(vals.len() - 1);
            let f = s - lo as f64;
            if lo == hi { vals[lo] } else { vals[lo] * (1.0 - f) + vals[hi] * f }
        }
        let vals = [1.0, 3.0];
        let want: Vec<f64> = (0..4).map(|k| oracle((k as f64 + 0.5) * 0.5 - 0.5, &vals)).collect();
        assert_eq!(want, vec![1.0, 1.5, 2.5, 3.0]);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vals.to_vec()).unwrap();
        let y = run(x, Resample::Bilinear, (1, 4)).unwrap();
        assert_eq!(y.data(), &want[..]);
    }

    #[test]
    fn zero_target_is_error() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(run(x, Resample::Bilinear, (0, 4)).is_err());
    }
}
