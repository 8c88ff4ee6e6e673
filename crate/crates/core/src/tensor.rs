//! Dense rank-4 tensors in NCHW layout.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type for tensors.
///
/// Models run in `f32`. The same kernels are instantiated at `f64` so that
/// finite-difference checks can be run without single-precision round-off
/// swamping the comparison.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    /// `exp` for finite inputs, written so loops over it vectorize. Inputs
    /// are clamped so the result is always finite and positive.
    fn exp_fast(self) -> Self;

    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    /// Panics if a slice is too short for its strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $erf:path, $exp:expr) => {
        impl Real for $t {
            const NAME: &'static str = stringify!($t);

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            #[inline]
            fn exp_fast(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || max_offset(m, k, rsa, csa) < a.len());
                assert!(k == 0 || max_offset(k, n, rsb, csb) < b.len());
                assert!(max_offset(m, n, rsc, csc) < c.len());
                // SAFETY: the assertions above bound every address the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, libm::erff, exp_f32);
impl_real!(f64, matrixmultiply::dgemm, libm::erf, |v: f64| v.clamp(-700.0, 700.0).exp());

/// `exp` on f32 via `2^n * p(r)` with `r = x - n ln 2` and the Cephes
/// degree-6 polynomial; relative error about 1e-7. Only float arithmetic
/// and integer bit operations, so it vectorizes. Inputs are clamped to
/// `[-87, 87]`; NaN is not propagated.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(87.0);
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let scale = t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
    y * f32::from_bits(scale)
}

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Per-channel vector stored as `(1, len, 1, 1)`.
    pub const fn vector(len: usize) -> Self {
        Self::new(1, len, 1, 1)
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: &[usize]) -> Result<Self> {
        match d {
            [n, c, h, w] => Ok(Self::new(*n, *c, *h, *w)),
            _ => Err(Error::InvalidArgument(format!(
                "expected 4 dimensions, got {}",
                d.len()
            ))),
        }
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense tensor. `data.len() == shape.numel()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>[{}]", T::NAME, self.shape)
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{} elements for shape {shape}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{} -> {shape}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        map_sum(&self.data, |v| v)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of sample range `[start, start + len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.n {
            return Err(Error::Shape {
                op: "batch_slice",
                detail: format!("{start}+{len} of {}", self.shape),
            });
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Self {
            shape: Shape::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("empty stack".into()))?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::Shape {
                    op: "stack_batch",
                    detail: format!("{} vs {}", p.shape, s),
                });
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }
}

/// NaN/inf detector. `x * 0` is NaN exactly when `x` is not finite; eight
/// independent accumulators let the loop vectorize.
pub fn all_finite<T: Real>(v: &[T]) -> bool {
    let mut acc = [T::zero(); LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i] * T::zero();
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &x| a + x * T::zero());
    acc.iter().fold(tail, |a, &x| a + x).is_finite()
}

const LANES: usize = 8;
/// Elements per block accumulated in `T` before folding into f64.
const BLOCK: usize = 256;

/// `sum f(a_i, b_i)` with lane-parallel partial sums in `T`, folded into f64
/// every few hundred elements to bound rounding error.
#[inline]
pub fn zip_sum<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    for (ba, bb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut acc = [T::zero(); LANES];
        let mut ca = ba.chunks_exact(LANES);
        let mut cb = bb.chunks_exact(LANES);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for i in 0..LANES {
                acc[i] += f(x[i], y[i]);
            }
        }
        for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
            acc[0] += f(x, y);
        }
        total += acc.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    total
}

/// `sum f(a_i)`; see [`zip_sum`].
#[inline]
pub fn map_sum<T: Real>(a: &[T], f: impl Fn(T) -> T) -> f64 {
    zip_sum(a, a, |x, _| f(x))
}
