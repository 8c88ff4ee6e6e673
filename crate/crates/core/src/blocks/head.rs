use super::{conv_norm_act, Backend, ConvSpec};
use crate::error::{Error, Result};
use crate::ops::Activation;

/// 3x3 conv (with bias), batch norm and SiLU from RGB to `out_ch`.
pub fn stem<B: Backend>(b: &mut B, path: &str, x: B::X, out_ch: usize) -> Result<B::X> {
    let c = b.shape(x).c;
    if c != 3 {
        return Err(Error::shape("stem", format!("expected 3 input channels, got {c}")));
    }
    conv_norm_act(b, path, x, &ConvSpec::full(3, out_ch, 3, true), Some(Activation::Silu))
}

/// Multi-scale head. Each of the five decoder maps goes through a 3x3 conv
/// to one channel and is resized to `full`; the five side logits are then
/// concatenated and fused by a 1x1 conv. Returns `[side1..side5, fused]`.
pub fn msfsh<B: Backend>(b: &mut B, path: &str, feats: &[B::X], full: (usize, usize)) -> Result<Vec<B::X>> {
    if feats.len() != 5 {
        return Err(Error::InvalidArgument(format!("msfsh needs 5 decoder maps, got {}", feats.len())));
    }
    let mut sides = Vec::with_capacity(6);
    for (i, &f) in feats.iter().enumerate() {
        let c = b.shape(f).c;
        let s = b.conv(&format!("{path}.side{}", i + 1), f, &ConvSpec::full(c, 1, 3, true))?;
        sides.push(b.bilinear(s, full)?);
    }
    let mut cat = sides[0];
    for &s in &sides[1..] {
        cat = b.concat_channels(cat, s)?;
    }
    let fused = b.conv(&format!("{path}.fuse"), cat, &ConvSpec::pointwise(5, 1, true))?;
    sides.push(fused);
    Ok(sides)
}
