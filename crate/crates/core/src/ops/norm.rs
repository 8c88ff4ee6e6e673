use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{map_sum, zip_sum, Real, Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics over `(batch, height, width)` per channel.
    Batch,
    /// Statistics over channels, independently at every `(batch, h, w)`.
    Layer,
}

/// Affine parameters and (batch-norm only) running statistics.
#[derive(Debug, Clone)]
pub struct NormParams<T: Real> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> NormParams<T> {
    /// Layer-norm parameters (no running statistics).
    pub fn affine(gamma: Var, beta: Var) -> Self {
        Self {
            gamma,
            beta,
            running_mean: Vec::new(),
            running_var: Vec::new(),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn with_running(gamma: Var, beta: Var, mean: Vec<T>, var: Vec<T>) -> Self {
        Self {
            running_mean: mean,
            running_var: var,
            ..Self::affine(gamma, beta)
        }
    }
}

fn check<T: Real>(tape: &Tape<T>, x: Var, p: &NormParams<T>, kind: NormKind) -> Result<usize> {
    let c = tape.shape(x).c;
    if !(p.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("norm eps must be positive, got {}", p.eps)));
    }
    for v in [p.gamma, p.beta] {
        if tape.shape(v) != Shape::vector(c) {
            return Err(Error::shape("normalize", format!("affine {} for {} channels", tape.shape(v), c)));
        }
    }
    if kind == NormKind::Batch {
        if p.running_mean.len() != c || p.running_var.len() != c {
            return Err(Error::shape("normalize", format!("running stats of length {} for {} channels", p.running_mean.len(), c)));
        }
        if p.running_var.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::InvalidArgument("running variance must be strictly positive".into()));
        }
    }
    Ok(c)
}

/// Normalization followed by the per-channel affine transform.
///
/// In training mode batch norm uses batch statistics and folds them into the
/// running estimates (`momentum`, unbiased variance); in eval mode it uses
/// the running estimates. Layer norm behaves identically in both modes.
pub fn normalize<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &mut NormParams<T>,
    kind: NormKind,
    training: bool,
) -> Result<Var> {
    check(tape, x, p, kind)?;
    match kind {
        NormKind::Batch if training => batch_norm_train(tape, x, p),
        NormKind::Batch => batch_norm_eval(tape, x, p),
        NormKind::Layer => layer_norm(tape, x, p),
    }
}

fn batch_norm_train<T: Real>(tape: &mut Tape<T>, x: Var, p: &mut NormParams<T>) -> Result<Var> {
    let s = tape.shape(x);
    let plane = s.plane();
    let count = s.n * plane;
    let xv = tape.rc(x);
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let xs = &xv.data()[(n * s.c + c) * plane..][..plane];
            mean[c] += map_sum(xs, |v| v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            let xs = &xv.data()[(n * s.c + c) * plane..][..plane];
            let m = T::from_f64(mean[c]);
            var[c] += map_sum(xs, |v| (v - m) * (v - m));
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);

    // running statistics
    let mom = p.momentum;
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for c in 0..s.c {
        let rm = p.running_mean[c].as_f64();
        let rv = p.running_var[c].as_f64();
        p.running_mean[c] = T::from_f64((1.0 - mom) * rm + mom * mean[c]);
        p.running_var[c] = T::from_f64((1.0 - mom) * rv + mom * var[c] * unbias);
    }

    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + p.eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
    let gamma = tape.rc(p.gamma);
    let beta = tape.rc(p.beta);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let (m, is, g, b) = (mean_t[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            let scale = g * is;
            let shift = b - m * scale;
            for (yv, &xv) in y.data_mut()[off..off + plane].iter_mut().zip(&xv.data()[off..off + plane]) {
                *yv = xv * scale + shift;
            }
        }
    }
    let (gv, bv) = (p.gamma, p.beta);
    tape.record("batch_norm", y, &[x, gv, bv], move |gy, sink| {
        // sums over each channel of gy and gy * xhat
        let mut sum_g = vec![T::zero(); s.c];
        let mut sum_gx = vec![T::zero(); s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                let m = mean_t[c];
                let (g, xs) = (&gy.data()[off..off + plane], &xv.data()[off..off + plane]);
                sum_g[c] += T::from_f64(map_sum(g, |v| v));
                sum_gx[c] += T::from_f64(zip_sum(g, xs, |g, x| g * (x - m))) * inv_std[c];
            }
        }
        if let Some(gb) = sink.buf(bv) {
            for c in 0..s.c {
                gb[c] += sum_g[c];
            }
        }
        if let Some(gg) = sink.buf(gv) {
            for c in 0..s.c {
                gg[c] += sum_gx[c];
            }
        }
        if let Some(gx) = sink.buf(x) {
            let inv_m = T::from_f64(1.0 / count as f64);
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    let (m, is, g) = (mean_t[c], inv_std[c], gamma.data()[c]);
                    let k = g * is;
                    let mg = sum_g[c] * inv_m;
                    let mgx = sum_gx[c] * inv_m;
                    for ((o, &gyv), &xv) in gx[off..off + plane]
                        .iter_mut()
                        .zip(&gy.data()[off..off + plane])
                        .zip(&xv.data()[off..off + plane])
                    {
                        let xhat = (xv - m) * is;
                        *o += k * (gyv - mg - xhat * mgx);
                    }
                }
            }
        }
    })
}

fn batch_norm_eval<T: Real>(tape: &mut Tape<T>, x: Var, p: &NormParams<T>) -> Result<Var> {
    let s = tape.shape(x);
    let plane = s.plane();
    let xv = tape.rc(x);
    let gamma = tape.rc(p.gamma);
    let beta = tape.rc(p.beta);
    let inv_std: Vec<T> = p
        .running_var
        .iter()
        .map(|v| T::from_f64(1.0 / (v.as_f64() + p.eps).sqrt()))
        .collect();
    let mean = p.running_mean.clone();
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - mean[c] * scale;
            for (yv, &xv) in y.data_mut()[off..off + plane].iter_mut().zip(&xv.data()[off..off + plane]) {
                *yv = xv * scale + shift;
            }
        }
    }
    let (gv, bv) = (p.gamma, p.beta);
    tape.record("batch_norm", y, &[x, gv, bv], move |gy, sink| {
        if sink.wants(gv) || sink.wants(bv) {
            let mut sg = vec![T::zero(); s.c];
            let mut sgx = vec![T::zero(); s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    let (g, xs) = (&gy.data()[off..off + plane], &xv.data()[off..off + plane]);
                    let m = mean[c];
                    sg[c] += T::from_f64(map_sum(g, |v| v));
                    sgx[c] += T::from_f64(zip_sum(g, xs, |g, x| g * (x - m))) * inv_std[c];
                }
            }
            if let Some(b) = sink.buf(bv) {
                b.iter_mut().zip(&sg).for_each(|(a, v)| *a += *v);
            }
            if let Some(g) = sink.buf(gv) {
                g.iter_mut().zip(&sgx).for_each(|(a, v)| *a += *v);
            }
        }
        if let Some(gx) = sink.buf(x) {
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    let k = gamma.data()[c] * inv_std[c];
                    for (o, &g) in gx[off..off + plane].iter_mut().zip(&gy.data()[off..off + plane]) {
                        *o += k * g;
                    }
                }
            }
        }
    })
}

/// Channel-axis layer norm: statistics over `c` at each `(n, h, w)`.
fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, p: &NormParams<T>) -> Result<Var> {
    let s = tape.shape(x);
    let plane = s.plane();
    let xv = tape.rc(x);
    let gamma = tape.rc(p.gamma);
    let beta = tape.rc(p.beta);
    let inv_c = T::from_f64(1.0 / s.c as f64);
    let eps = T::from_f64(p.eps);
    // per-position mean and inverse std, laid out (n, h*w)
    let mut mean = vec![T::zero(); s.n * plane];
    let mut inv_std = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        let m = &mut mean[n * plane..][..plane];
        for c in 0..s.c {
            let xs = &xv.data()[(n * s.c + c) * plane..][..plane];
            m.iter_mut().zip(xs).for_each(|(a, &v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a = *a * inv_c);
        let is = &mut inv_std[n * plane..][..plane];
        for c in 0..s.c {
            let xs = &xv.data()[(n * s.c + c) * plane..][..plane];
            for ((a, &v), &mu) in is.iter_mut().zip(xs).zip(m.iter()) {
                let d = v - mu;
                *a += d * d;
            }
        }
        is.iter_mut().for_each(|a| *a = T::one() / (*a * inv_c + eps).sqrt());
    }
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let m = &mean[n * plane..][..plane];
            let is = &inv_std[n * plane..][..plane];
            for (((yv, &xv), &mu), &isv) in y.data_mut()[off..off + plane].iter_mut().zip(&xv.data()[off..off + plane]).zip(m).zip(is) {
                *yv = (xv - mu) * isv * g + b;
            }
        }
    }
    let (gv, bv) = (p.gamma, p.beta);
    tape.record("layer_norm", y, &[x, gv, bv], move |gy, sink| {
        let xhat = |n: usize, c: usize, i: usize| {
            let off = (n * s.c + c) * plane;
            (xv.data()[off + i] - mean[n * plane + i]) * inv_std[n * plane + i]
        };
        if sink.wants(gv) || sink.wants(bv) {
            let mut sg = vec![T::zero(); s.c];
            let mut sgx = vec![T::zero(); s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    for i in 0..plane {
                        let g = gy.data()[off + i];
                        sg[c] += g;
                        sgx[c] += g * xhat(n, c, i);
                    }
                }
            }
            if let Some(b) = sink.buf(bv) {
                b.iter_mut().zip(&sg).for_each(|(a, v)| *a += *v);
            }
            if let Some(g) = sink.buf(gv) {
                g.iter_mut().zip(&sgx).for_each(|(a, v)| *a += *v);
            }
        }
        if sink.wants(x) {
            // per position: dx = is * (dxh - mean(dxh) - xhat * mean(dxh * xhat)), dxh = gy * gamma
            let mut m1 = vec![T::zero(); plane];
            let mut m2 = vec![T::zero(); plane];
            let gx = sink.buf(x).expect("x wants grad");
            for n in 0..s.n {
                m1.iter_mut().for_each(|v| *v = T::zero());
                m2.iter_mut().for_each(|v| *v = T::zero());
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    let g = gamma.data()[c];
                    for i in 0..plane {
                        let d = gy.data()[off + i] * g;
                        m1[i] += d;
                        m2[i] += d * xhat(n, c, i);
                    }
                }
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    let g = gamma.data()[c];
                    for i in 0..plane {
                        let d = gy.data()[off + i] * g;
                        let is = inv_std[n * plane + i];
                        gx[off + i] += is * (d - m1[i] * inv_c - xhat(n, c, i) * m2[i] * inv_c);
                    }
                }
            }
        }
    })
}
