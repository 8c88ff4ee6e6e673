use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

pub fn elementwise<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, kind: Binary) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape("elementwise", format!("{sa} vs {sb}")));
    }
    let av = tape.rc(a);
    let bv = tape.rc(b);
    match kind {
        Binary::Add => {
            let mut y = (*av).clone();
            y.data_mut().iter_mut().zip(bv.data()).for_each(|(o, &v)| *o += v);
            tape.record("add", y, &[a, b], move |gy, sink| {
                for v in [a, b] {
                    if let Some(g) = sink.buf(v) {
                        g.iter_mut().zip(gy.data()).for_each(|(o, &v)| *o += v);
                    }
                }
            })
        }
        Binary::Mul => {
            let mut y = (*av).clone();
            y.data_mut().iter_mut().zip(bv.data()).for_each(|(o, &v)| *o = *o * v);
            tape.record("mul", y, &[a, b], move |gy, sink| {
                if let Some(g) = sink.buf(a) {
                    for ((o, &gv), &v) in g.iter_mut().zip(gy.data()).zip(bv.data()) {
                        *o += gv * v;
                    }
                }
                if let Some(g) = sink.buf(b) {
                    for ((o, &gv), &v) in g.iter_mut().zip(gy.data()).zip(av.data()) {
                        *o += gv * v;
                    }
                }
            })
        }
    }
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, a, b, Binary::Add)
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, a, b, Binary::Mul)
}

/// `x * gate` where `gate` is `(n, c, 1, 1)` and broadcasts over space.
pub fn mul_channel<T: Real>(tape: &mut Tape<T>, x: Var, gate: Var) -> Result<Var> {
    let (sx, sg) = (tape.shape(x), tape.shape(gate));
    if sg != Shape::new(sx.n, sx.c, 1, 1) {
        return Err(Error::shape("mul_channel", format!("gate {sg} for input {sx}")));
    }
    let plane = sx.plane();
    let xv = tape.rc(x);
    let gv = tape.rc(gate);
    let mut y = (*xv).clone();
    for (chunk, &g) in y.data_mut().chunks_mut(plane).zip(gv.data()) {
        chunk.iter_mut().for_each(|v| *v = *v * g);
    }
    tape.record("mul_channel", y, &[x, gate], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            for ((o, g), &k) in gx.chunks_mut(plane).zip(gy.data().chunks(plane)).zip(gv.data()) {
                o.iter_mut().zip(g).for_each(|(a, &b)| *a += b * k);
            }
        }
        if let Some(gg) = sink.buf(gate) {
            for ((o, g), xs) in gg.iter_mut().zip(gy.data().chunks(plane)).zip(xv.data().chunks(plane)) {
                *o += g.iter().zip(xs).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
    })
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape("concat_channels", format!("{sa} vs {sb}")));
    }
    let plane = sa.plane();
    let (la, lb) = (sa.c * plane, sb.c * plane);
    let av = tape.rc(a);
    let bv = tape.rc(b);
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&av.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&bv.data()[n * lb..(n + 1) * lb]);
    }
    let y = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)?;
    tape.record("concat_channels", y, &[a, b], move |gy, sink| {
        let g = gy.data();
        if let Some(ga) = sink.buf(a) {
            for n in 0..sa.n {
                let src = &g[n * (la + lb)..][..la];
                ga[n * la..(n + 1) * la].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
            }
        }
        if let Some(gb) = sink.buf(b) {
            for n in 0..sa.n {
                let src = &g[n * (la + lb) + la..][..lb];
                gb[n * lb..(n + 1) * lb].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
            }
        }
    })
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Real>(tape: &mut Tape<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.shape(x);
    if start + len > s.c || len == 0 {
        return Err(Error::shape("slice_channels", format!("[{start}, {}) of {s}", start + len)));
    }
    let plane = s.plane();
    let xv = tape.rc(x);
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        data.extend_from_slice(&xv.data()[(n * s.c + start) * plane..][..len * plane]);
    }
    let y = Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)?;
    tape.record("slice_channels", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            for n in 0..s.n {
                let dst = &mut gx[(n * s.c + start) * plane..][..len * plane];
                let src = &gy.data()[n * len * plane..][..len * plane];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
            }
        }
    })
}

/// Stacks along the batch axis, `a` first.
pub fn concat_batch<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if (sa.c, sa.h, sa.w) != (sb.c, sb.h, sb.w) {
        return Err(Error::shape("concat_batch", format!("{sa} vs {sb}")));
    }
    let y = Tensor::stack_batch(&[tape.value(a), tape.value(b)])?;
    let split = sa.numel();
    tape.record("concat_batch", y, &[a, b], move |gy, sink| {
        let (ha, hb) = gy.data().split_at(split);
        if let Some(ga) = sink.buf(a) {
            ga.iter_mut().zip(ha).for_each(|(o, &v)| *o += v);
        }
        if let Some(gb) = sink.buf(b) {
            gb.iter_mut().zip(hb).for_each(|(o, &v)| *o += v);
        }
    })
}

/// Samples `[start, start + len)`.
pub fn slice_batch<T: Real>(tape: &mut Tape<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.shape(x);
    let y = tape.value(x).batch_slice(start, len)?;
    let per = s.c * s.plane();
    tape.record("slice_batch", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            gx[start * per..(start + len) * per]
                .iter_mut()
                .zip(gy.data())
                .for_each(|(o, &v)| *o += v);
        }
    })
}

/// Splits an even batch into its two halves.
pub fn split_pair<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let n = tape.shape(x).n;
    if n % 2 != 0 {
        return Err(Error::shape("split_pair", format!("odd batch {n}")));
    }
    Ok((slice_batch(tape, x, 0, n / 2)?, slice_batch(tape, x, n / 2, n / 2)?))
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, k: f64) -> Result<Var> {
    let kt = T::from_f64(k);
    let y = tape.value(x).map(|v| v * kt);
    tape.record("scale", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            gx.iter_mut().zip(gy.data()).for_each(|(o, &v)| *o += v * kt);
        }
    })
}

/// Sum of every element, as a scalar.
pub fn sum_all<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let total = tape.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
    tape.record("sum_all", Tensor::scalar(total), &[x], move |gy, sink| {
        let g = gy.data()[0];
        if let Some(gx) = sink.buf(x) {
            gx.iter_mut().for_each(|o| *o += g);
        }
    })
}

/// Per-channel spatial mean, `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let plane = s.plane();
    if plane == 0 {
        return Err(Error::shape("global_avg_pool", format!("empty input {s}")));
    }
    let inv = T::from_f64(1.0 / plane as f64);
    let data: Vec<T> = tape
        .value(x)
        .data()
        .chunks(plane)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    let y = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
    tape.record("global_avg_pool", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            for (chunk, &g) in gx.chunks_mut(plane).zip(gy.data()) {
                let v = g * inv;
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
    })
}

/// Stochastic depth: in training every sample is kept with probability
/// `1 - rate` and survivors are scaled by `1 / (1 - rate)`. Identity in eval
/// mode or at rate 0.
pub fn droppath<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("droppath rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let s = tape.shape(x);
    let keep = 1.0 - rate;
    let factors: Vec<T> = (0..s.n)
        .map(|_| if rng.gen::<f64>() < keep { T::from_f64(1.0 / keep) } else { T::zero() })
        .collect();
    let per = s.c * s.plane();
    let mut y = tape.value(x).clone();
    if per > 0 {
        for (chunk, &f) in y.data_mut().chunks_mut(per).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v = *v * f);
        }
    }
    tape.record("droppath", y, &[x], move |gy, sink| {
        if let Some(gx) = sink.buf(x) {
            if per == 0 {
                return;
            }
            for ((o, g), &f) in gx.chunks_mut(per).zip(gy.data().chunks(per)).zip(&factors) {
                o.iter_mut().zip(g).for_each(|(a, &b)| *a += b * f);
            }
        }
    })
}
