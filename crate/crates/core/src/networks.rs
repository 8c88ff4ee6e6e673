//! SPNet (single image) and SChanger (bitemporal Siamese) assembly.
//!
//! Both share one topology: a stem, five encoder stages of two LFEMs with
//! max pooling ahead of stages 2 to 5, attention on the four skips and on
//! the stage-5 bridge, a mirrored decoder and the multi-scale head. SChanger
//! runs both images as one batch `[t1; t2]` through the shared layers, swaps
//! every attention block for its two-stream form and fuses the streams with
//! a TFM after each decoder stage.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{
    init_params, lfem, msfsh, scam_batched, stem, tfm, vanm, AttnConfig, Backend, Ctx, LayerSpec, LfemConfig,
    Tracer,
};
use crate::data_io::{Checkpoint, Metadata};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;
pub const DOWNSAMPLE_RATIOS: [usize; 6] = [1, 1, 2, 4, 8, 16];
/// Spatial size used to enumerate layers; any multiple of 16 gives the same
/// parameter set.
const TRACE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Small,
    Base,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Small => "small",
            Variant::Base => "base",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected small or base)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Spnet,
    Schanger,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Spnet => "spnet",
            Mode::Schanger => "schanger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantConfig {
    pub name: Variant,
    /// `C0..C5`: stem width then the five stage widths. The decoder mirrors
    /// the encoder.
    pub channels: [usize; 6],
    pub downsample_ratios: [usize; 6],
    /// Hidden width of the attention blocks' feed-forward, as a multiple of
    /// the block width.
    pub ffn_ratio: usize,
    pub droppath_rate: f64,
}

impl VariantConfig {
    pub fn small() -> Self {
        VariantConfig {
            name: Variant::Small,
            channels: [8, 16, 32, 40, 48, 48],
            downsample_ratios: DOWNSAMPLE_RATIOS,
            ffn_ratio: 2,
            droppath_rate: 0.0,
        }
    }

    pub fn base() -> Self {
        VariantConfig {
            name: Variant::Base,
            channels: [24, 32, 48, 64, 104, 120],
            ..Self::small()
        }
    }

    pub fn of(v: Variant) -> Self {
        match v {
            Variant::Small => Self::small(),
            Variant::Base => Self::base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("channel plan {:?} has a zero width", self.channels)));
        }
        if self.downsample_ratios != DOWNSAMPLE_RATIOS {
            return Err(Error::Config(format!(
                "downsample ratios must be {DOWNSAMPLE_RATIOS:?}, got {:?}",
                self.downsample_ratios
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(Error::Config(format!("droppath rate {} outside [0, 1)", self.droppath_rate)));
        }
        Ok(())
    }

    fn lfem(&self, i: usize, o: usize) -> LfemConfig {
        LfemConfig::new(i, o).droppath(self.droppath_rate)
    }

    fn attn(&self, c: usize) -> AttnConfig {
        AttnConfig::new(c, self.ffn_ratio)
    }
}

/// Layer list of a built network plus what it was built from.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub mode: Mode,
    pub variant: VariantConfig,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    pub fn new(mode: Mode, variant: VariantConfig) -> Result<Self> {
        variant.validate()?;
        let mut t = Tracer::new();
        let n = match mode {
            Mode::Spnet => 1,
            Mode::Schanger => 2,
        };
        let x = t.input(Shape::new(n, 3, TRACE_SIZE, TRACE_SIZE));
        forward(&mut t, mode, &variant, x)?;
        Ok(ModelGraph {
            mode,
            variant,
            layers: t.layers,
        })
    }

    /// Re-traces at `input` (batch, 3, h, w). For SChanger the batch holds
    /// both temporal images.
    pub fn trace(&self, input: Shape) -> Result<Tracer> {
        check_input(input)?;
        let mut t = Tracer::new();
        let x = t.input(input);
        forward(&mut t, self.mode, &self.variant, x)?;
        Ok(t)
    }

    /// Every tensor path the checkpoint must hold.
    pub fn tensor_paths(&self) -> Result<BTreeSet<String>> {
        Ok(init_params(&self.layers, 0)?.into_keys().collect())
    }

    pub fn init(&self, seed: u64) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(Metadata {
            variant: self.variant.name.name().into(),
            mode: self.mode.name().into(),
            seed,
        });
        ckpt.tensors = init_params(&self.layers, seed)?;
        Ok(ckpt)
    }

    /// Errors unless `ckpt` was built for this mode and variant and holds
    /// every path.
    pub fn check(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.meta.variant != self.variant.name.name() {
            return Err(Error::VariantMismatch {
                expected: self.variant.name.name().into(),
                found: ckpt.meta.variant.clone(),
            });
        }
        let paths = self.tensor_paths()?;
        ckpt.require(paths.iter().map(String::as_str))
    }

    /// Runs on any backend. `input` is `(n, 3, h, w)` for SPNet and the
    /// stacked pair `(2n, 3, h, w)` for SChanger. Returns six logit maps.
    pub fn forward<B: Backend>(&self, b: &mut B, input: B::X) -> Result<Vec<B::X>> {
        check_input(b.shape(input))?;
        forward(b, self.mode, &self.variant, input)
    }
}

pub fn build_spnet(cfg: &VariantConfig, seed: u64) -> Result<(ModelGraph, Checkpoint)> {
    let g = ModelGraph::new(Mode::Spnet, *cfg)?;
    let c = g.init(seed)?;
    Ok((g, c))
}

pub fn build_schanger(cfg: &VariantConfig, seed: u64) -> Result<(ModelGraph, Checkpoint)> {
    let g = ModelGraph::new(Mode::Schanger, *cfg)?;
    let c = g.init(seed)?;
    Ok((g, c))
}

fn check_input(s: Shape) -> Result<()> {
    if s.c != 3 {
        return Err(Error::shape("network input", format!("expected 3 channels, got {s}")));
    }
    if s.h == 0 || s.w == 0 || s.h % SIZE_MULTIPLE != 0 || s.w % SIZE_MULTIPLE != 0 {
        return Err(Error::shape(
            "network input",
            format!("spatial size {}x{} is not a positive multiple of {SIZE_MULTIPLE}", s.h, s.w),
        ));
    }
    Ok(())
}

fn attention<B: Backend>(b: &mut B, mode: Mode, path: &str, x: B::X, cfg: &AttnConfig) -> Result<B::X> {
    match mode {
        Mode::Spnet => vanm(b, path, x, cfg),
        Mode::Schanger => scam_batched(b, path, x, cfg),
    }
}

fn forward<B: Backend>(b: &mut B, mode: Mode, v: &VariantConfig, input: B::X) -> Result<Vec<B::X>> {
    let ch = v.channels;
    let s = b.shape(input);
    let full = (s.h, s.w);

    let mut x = stem(b, "stem", input, ch[0])?;
    let mut enc = Vec::with_capacity(5);
    for st in 1..=5 {
        if st > 1 {
            x = b.maxpool2(x)?;
        }
        x = lfem(b, &format!("enc{st}.a"), x, &v.lfem(ch[st - 1], ch[st]))?;
        x = lfem(b, &format!("enc{st}.b"), x, &v.lfem(ch[st], ch[st]))?;
        enc.push(x);
    }

    let bridge = attention(b, mode, "bridge", enc[4], &v.attn(ch[5]))?;
    let d = lfem(b, "dec5.a", bridge, &v.lfem(ch[5], ch[5]))?;
    let mut d = lfem(b, "dec5.b", d, &v.lfem(ch[5], ch[5]))?;
    let mut dec = vec![d];
    for st in (1..=4).rev() {
        let skip = attention(b, mode, &format!("skip{st}"), enc[st - 1], &v.attn(ch[st]))?;
        let target = b.shape(enc[st - 1]);
        let up = b.bilinear(d, (target.h, target.w))?;
        let y = lfem(b, &format!("dec{st}.a"), up, &v.lfem(ch[st + 1], ch[st]))?;
        let y = b.add(y, skip)?;
        d = lfem(b, &format!("dec{st}.b"), y, &v.lfem(ch[st], ch[st]))?;
        dec.push(d);
    }
    dec.reverse();

    if mode == Mode::Schanger {
        for (i, f) in dec.iter_mut().enumerate() {
            let (a, c) = b.split_pair(*f)?;
            *f = tfm(b, &format!("dec{}.sfa", i + 1), a, c)?;
        }
    }
    msfsh(b, "head", &dec, full)
}

/// Paths of the stream-fusion modules SChanger adds to SPNet.
pub fn tfm_prefixes() -> Vec<String> {
    let mut p: Vec<String> = (1..=4).map(|s| format!("skip{s}.tfm.")).collect();
    p.push("bridge.tfm.".into());
    p.extend((1..=5).map(|s| format!("dec{s}.sfa.")));
    p
}

pub fn is_tfm_path(path: &str) -> bool {
    tfm_prefixes().iter().any(|p| path.starts_with(p.as_str()))
}

/// SPNet forward on a tape.
pub fn spnet_forward<T: crate::Real>(ctx: &mut Ctx<'_, T>, g: &ModelGraph, image: Var) -> Result<Vec<Var>> {
    if g.mode != Mode::Spnet {
        return Err(Error::InvalidArgument("spnet_forward needs an SPNet graph".into()));
    }
    g.forward(ctx, image)
}

/// SChanger forward on a tape.
pub fn schanger_forward<T: crate::Real>(
    ctx: &mut Ctx<'_, T>,
    g: &ModelGraph,
    img1: Var,
    img2: Var,
) -> Result<Vec<Var>> {
    if g.mode != Mode::Schanger {
        return Err(Error::InvalidArgument("schanger_forward needs an SChanger graph".into()));
    }
    let (s1, s2) = (ctx.shape(img1), ctx.shape(img2));
    if s1 != s2 {
        return Err(Error::shape("schanger_forward", format!("temporal inputs {s1} vs {s2}")));
    }
    let x = ctx.concat_batch(img1, img2)?;
    g.forward(ctx, x)
}

/// Eval-mode logits for a batch. `t2` must be given for SChanger and omitted
/// for SPNet.
pub fn infer(g: &ModelGraph, ckpt: &Checkpoint, t1: &Tensor<f32>, t2: Option<&Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::eval(&mut tape, ckpt);
    let x1 = ctx.input(t1);
    let outs = match (g.mode, t2) {
        (Mode::Spnet, None) => spnet_forward(&mut ctx, g, x1)?,
        (Mode::Schanger, Some(t2)) => {
            let x2 = ctx.input(t2);
            schanger_forward(&mut ctx, g, x1, x2)?
        }
        _ => return Err(Error::InvalidArgument("second image given for the wrong mode".into())),
    };
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}
