use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// Exact form `v * Phi(v)` using the error function.
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp_fast())
}

#[inline]
pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

#[inline]
pub fn gelu<T: Real>(v: T) -> T {
    let half = T::from_f64(0.5);
    half * v * (T::one() + (v * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(v: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (v * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(0.398_942_280_401_432_7) * (-half * v * v).exp();
    cdf + v * pdf
}

/// Elementwise activation.
pub fn activation<T: Real>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Result<Var> {
    let xv = tape.rc(x);
    match kind {
        Activation::Sigmoid => {
            let y = xv.map(sigmoid);
            tape.record("sigmoid", y, &[x], move |gy, sink| {
                if let Some(gx) = sink.buf(x) {
                    for ((o, &g), &v) in gx.iter_mut().zip(gy.data()).zip(xv.data()) {
                        let s = sigmoid(v);
                        *o += g * s * (T::one() - s);
                    }
                }
            })
        }
        Activation::Silu => {
            let y = xv.map(silu);
            tape.record("silu", y, &[x], move |gy, sink| {
                if let Some(gx) = sink.buf(x) {
                    for ((o, &g), &v) in gx.iter_mut().zip(gy.data()).zip(xv.data()) {
                        let s = sigmoid(v);
                        *o += g * s * (T::one() + v * (T::one() - s));
                    }
                }
            })
        }
        Activation::Gelu => {
            let y = xv.map(gelu);
            tape.record("gelu", y, &[x], move |gy, sink| {
                if let Some(gx) = sink.buf(x) {
                    for ((o, &g), &v) in gx.iter_mut().zip(gy.data()).zip(xv.data()) {
                        *o += g * gelu_grad(v);
                    }
                }
            })
        }
    }
}
