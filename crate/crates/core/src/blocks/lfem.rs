use super::{conv_norm_act, Backend, ConvSpec};
use crate::error::{Error, Result};
use crate::ops::Activation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfemConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub se_ratio: f64,
    pub droppath_rate: f64,
}

impl LfemConfig {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        LfemConfig {
            in_ch,
            out_ch,
            expansion: 6,
            se_ratio: 0.25,
            droppath_rate: 0.0,
        }
    }

    pub fn droppath(mut self, rate: f64) -> Self {
        self.droppath_rate = rate;
        self
    }

    pub fn expanded(&self) -> usize {
        self.expansion * self.in_ch
    }

    /// SE bottleneck width, relative to the block input.
    pub fn squeezed(&self) -> usize {
        ((self.se_ratio * self.in_ch as f64).round() as usize).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.in_ch == self.out_ch
    }
}

/// Squeeze-and-excitation gate: `x * sigmoid(W2 silu(W1 gap(x)))`.
pub fn se<B: Backend>(b: &mut B, path: &str, x: B::X, squeezed: usize) -> Result<B::X> {
    let c = b.shape(x).c;
    let s = b.global_avg_pool(x)?;
    let s = b.conv(&format!("{path}.reduce"), s, &ConvSpec::pointwise(c, squeezed, true))?;
    let s = b.act(&format!("{path}.reduce_act"), s, Activation::Silu)?;
    let s = b.conv(&format!("{path}.expand"), s, &ConvSpec::pointwise(squeezed, c, true))?;
    let g = b.act(&format!("{path}.gate"), s, Activation::Sigmoid)?;
    b.mul_channel(x, g)
}

/// Inverted bottleneck: pointwise expand, depthwise 3x3, SE, pointwise
/// project, with a residual when the width is unchanged.
pub fn lfem<B: Backend>(b: &mut B, path: &str, x: B::X, cfg: &LfemConfig) -> Result<B::X> {
    let c = b.shape(x).c;
    if c != cfg.in_ch {
        return Err(Error::shape("lfem", format!("{path} expects {} channels, got {c}", cfg.in_ch)));
    }
    let e = cfg.expanded();
    let y = conv_norm_act(b, &format!("{path}.expand"), x, &ConvSpec::pointwise(cfg.in_ch, e, false), Some(Activation::Silu))?;
    let y = conv_norm_act(b, &format!("{path}.dw"), y, &ConvSpec::depthwise(e, 3, 1, false), Some(Activation::Silu))?;
    let y = se(b, &format!("{path}.se"), y, cfg.squeezed())?;
    let y = conv_norm_act(b, &format!("{path}.project"), y, &ConvSpec::pointwise(e, cfg.out_ch, false), None)?;
    if cfg.has_residual() {
        let y = b.droppath(y, cfg.droppath_rate)?;
        b.add(x, y)
    } else {
        Ok(y)
    }
}
