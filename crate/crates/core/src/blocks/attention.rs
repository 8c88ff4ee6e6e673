use super::{Backend, ConvSpec};
use crate::error::{Error, Result};
use crate::ops::{Activation, NormKind};

/// Decomposed large-kernel attention: depthwise `k1`, depthwise `k2` with
/// dilation `d`, then pointwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SclkaConfig {
    pub channels: usize,
    pub k1: usize,
    pub k2: usize,
    pub d: usize,
}

impl SclkaConfig {
    pub fn new(channels: usize) -> Self {
        SclkaConfig {
            channels,
            k1: 5,
            k2: 7,
            d: 3,
        }
    }

    /// Chebyshev radius of the attention map's receptive field.
    pub fn radius(&self) -> usize {
        (self.k1 - 1) / 2 + self.d * (self.k2 - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub sclka: SclkaConfig,
    pub ffn_ratio: usize,
}

impl AttnConfig {
    pub fn new(channels: usize, ffn_ratio: usize) -> Self {
        AttnConfig {
            sclka: SclkaConfig::new(channels),
            ffn_ratio,
        }
    }

    pub fn channels(&self) -> usize {
        self.sclka.channels
    }
}

fn check_channels<B: Backend>(b: &B, op: &'static str, x: B::X, c: usize) -> Result<()> {
    let s = b.shape(x);
    if s.c != c {
        return Err(Error::shape(op, format!("expected {c} channels, got {s}")));
    }
    Ok(())
}

/// Temporal fusion: concat, pointwise 2C -> C, channel layer norm, GELU.
pub fn tfm<B: Backend>(b: &mut B, path: &str, x1: B::X, x2: B::X) -> Result<B::X> {
    let (s1, s2) = (b.shape(x1), b.shape(x2));
    if s1 != s2 {
        return Err(Error::shape("tfm", format!("{s1} vs {s2}")));
    }
    let c = s1.c;
    let m = b.concat_channels(x1, x2)?;
    let s = b.conv(&format!("{path}.reduce"), m, &ConvSpec::pointwise(2 * c, c, true))?;
    let s = b.norm(&format!("{path}.norm"), s, NormKind::Layer)?;
    b.act(&format!("{path}.act"), s, Activation::Gelu)
}

/// Attention map of `t`.
pub fn lka<B: Backend>(b: &mut B, path: &str, t: B::X, cfg: &SclkaConfig) -> Result<B::X> {
    check_channels(b, "lka", t, cfg.channels)?;
    let c = cfg.channels;
    let s = b.conv(&format!("{path}.dw"), t, &ConvSpec::depthwise(c, cfg.k1, 1, true))?;
    let s = b.conv(&format!("{path}.dwd"), s, &ConvSpec::depthwise(c, cfg.k2, cfg.d, true))?;
    b.conv(&format!("{path}.pw"), s, &ConvSpec::pointwise(c, c, true))
}

/// Shared-map attention over two streams: the map is computed once from the
/// fused streams and multiplies both.
pub fn sclka<B: Backend>(b: &mut B, path: &str, x1: B::X, x2: B::X, cfg: &SclkaConfig) -> Result<(B::X, B::X)> {
    let t = tfm(b, &format!("{path}.tfm"), x1, x2)?;
    let attn = lka(b, &format!("{path}.lka"), t, cfg)?;
    Ok((b.mul(attn, x1)?, b.mul(attn, x2)?))
}

/// Convolutional feed-forward: pointwise expand, depthwise 3x3, GELU,
/// pointwise project.
pub fn ffn<B: Backend>(b: &mut B, path: &str, x: B::X, ratio: usize) -> Result<B::X> {
    let c = b.shape(x).c;
    let h = c * ratio;
    let y = b.conv(&format!("{path}.fc1"), x, &ConvSpec::pointwise(c, h, true))?;
    let y = b.conv(&format!("{path}.dw"), y, &ConvSpec::depthwise(h, 3, 1, true))?;
    let y = b.act(&format!("{path}.act"), y, Activation::Gelu)?;
    b.conv(&format!("{path}.fc2"), y, &ConvSpec::pointwise(h, c, true))
}

fn pre_attention<B: Backend>(b: &mut B, path: &str, x: B::X, c: usize) -> Result<B::X> {
    let h = b.norm(&format!("{path}.norm1"), x, NormKind::Batch)?;
    let h = b.conv(&format!("{path}.proj1"), h, &ConvSpec::pointwise(c, c, true))?;
    b.act(&format!("{path}.act"), h, Activation::Gelu)
}

fn post_attention<B: Backend>(b: &mut B, path: &str, x: B::X, h: B::X, cfg: &AttnConfig) -> Result<B::X> {
    let c = cfg.channels();
    let h = b.conv(&format!("{path}.proj2"), h, &ConvSpec::pointwise(c, c, true))?;
    let x = b.add(x, h)?;
    let h = b.norm(&format!("{path}.norm2"), x, NormKind::Batch)?;
    let h = ffn(b, &format!("{path}.ffn"), h, cfg.ffn_ratio)?;
    b.add(x, h)
}

/// Single-stream attention block:
/// `x + proj2(u * lka(u))` with `u = gelu(proj1(bn(x)))`, then `x + ffn(bn(x))`.
pub fn vanm<B: Backend>(b: &mut B, path: &str, x: B::X, cfg: &AttnConfig) -> Result<B::X> {
    check_channels(b, "vanm", x, cfg.channels())?;
    let u = pre_attention(b, path, x, cfg.channels())?;
    let attn = lka(b, &format!("{path}.lka"), u, &cfg.sclka)?;
    let h = b.mul(attn, u)?;
    post_attention(b, path, x, h, cfg)
}

/// Two-stream attention block on a batch holding `[stream1; stream2]`.
///
/// Same layout and parameter paths as [`vanm`], plus `{path}.tfm`, which
/// fuses the streams into the input of the shared attention map. Norm
/// statistics are taken over both streams together.
pub fn scam_batched<B: Backend>(b: &mut B, path: &str, x: B::X, cfg: &AttnConfig) -> Result<B::X> {
    check_channels(b, "scam", x, cfg.channels())?;
    let u = pre_attention(b, path, x, cfg.channels())?;
    let (u1, u2) = b.split_pair(u)?;
    let (h1, h2) = sclka(b, path, u1, u2, &cfg.sclka)?;
    let h = b.concat_batch(h1, h2)?;
    post_attention(b, path, x, h, cfg)
}

/// [`scam_batched`] on separate stream tensors.
pub fn scam<B: Backend>(b: &mut B, path: &str, x1: B::X, x2: B::X, cfg: &AttnConfig) -> Result<(B::X, B::X)> {
    let (s1, s2) = (b.shape(x1), b.shape(x2));
    if s1 != s2 {
        return Err(Error::shape("scam", format!("{s1} vs {s2}")));
    }
    let x = b.concat_batch(x1, x2)?;
    let y = scam_batched(b, path, x, cfg)?;
    b.split_pair(y)
}
