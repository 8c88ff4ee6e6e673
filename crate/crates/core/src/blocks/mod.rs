//! Architectural blocks.
//!
//! Each block is written once against [`Backend`]. [`Ctx`] executes it on an
//! autodiff tape; [`Tracer`] walks it symbolically to enumerate layers, their
//! parameters and their multiply-accumulate cost. Parameters are addressed by
//! dotted paths such as `enc3.a.expand.weight`.

mod attention;
mod ctx;
mod lfem;
mod head;
mod trace;

pub use attention::{ffn, lka, scam, scam_batched, sclka, tfm, vanm, AttnConfig, SclkaConfig};
pub use ctx::Ctx;
pub use head::{msfsh, stem};
pub use lfem::{lfem, se, LfemConfig};
pub use trace::{init_params, LayerOp, LayerSpec, Tracer};

use crate::error::Result;
use crate::ops::{Activation, NormKind};
use crate::tensor::Shape;

/// Stride-1 convolution with "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(in_ch: usize, out_ch: usize, bias: bool) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 1,
            dilation: 1,
            groups: 1,
            bias,
        }
    }

    pub fn full(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        ConvSpec {
            kernel,
            ..Self::pointwise(in_ch, out_ch, bias)
        }
    }

    pub fn depthwise(ch: usize, kernel: usize, dilation: usize, bias: bool) -> Self {
        ConvSpec {
            in_ch: ch,
            out_ch: ch,
            kernel,
            dilation,
            groups: ch,
            bias,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_ch } else { 0 }
    }
}

/// Operations a block may use. Handles are opaque and cheap to copy.
pub trait Backend {
    type X: Copy;

    fn shape(&self, x: Self::X) -> Shape;
    fn conv(&mut self, path: &str, x: Self::X, spec: &ConvSpec) -> Result<Self::X>;
    fn norm(&mut self, path: &str, x: Self::X, kind: NormKind) -> Result<Self::X>;
    fn act(&mut self, path: &str, x: Self::X, kind: Activation) -> Result<Self::X>;
    fn add(&mut self, a: Self::X, b: Self::X) -> Result<Self::X>;
    fn mul(&mut self, a: Self::X, b: Self::X) -> Result<Self::X>;
    /// `x * gate` with a `(n, c, 1, 1)` gate.
    fn mul_channel(&mut self, x: Self::X, gate: Self::X) -> Result<Self::X>;
    fn concat_channels(&mut self, a: Self::X, b: Self::X) -> Result<Self::X>;
    fn concat_batch(&mut self, a: Self::X, b: Self::X) -> Result<Self::X>;
    fn split_pair(&mut self, x: Self::X) -> Result<(Self::X, Self::X)>;
    fn global_avg_pool(&mut self, x: Self::X) -> Result<Self::X>;
    fn maxpool2(&mut self, x: Self::X) -> Result<Self::X>;
    fn bilinear(&mut self, x: Self::X, target: (usize, usize)) -> Result<Self::X>;
    /// Stochastic depth. Unlike the primitive op, rate 1 is accepted and
    /// zeroes `x` in training.
    fn droppath(&mut self, x: Self::X, rate: f64) -> Result<Self::X>;
}

/// conv, then norm, then an optional activation, named `{path}.conv`,
/// `{path}.bn` and `{path}.act`.
pub(crate) fn conv_norm_act<B: Backend>(
    b: &mut B,
    path: &str,
    x: B::X,
    spec: &ConvSpec,
    act: Option<Activation>,
) -> Result<B::X> {
    let y = b.conv(&format!("{path}.conv"), x, spec)?;
    let y = b.norm(&format!("{path}.bn"), y, NormKind::Batch)?;
    match act {
        Some(a) => b.act(&format!("{path}.act"), y, a),
        None => Ok(y),
    }
}
