use std::collections::BTreeMap;

use super::{Backend, ConvSpec};
use crate::data_io::{Param, ParamKind};
use crate::error::{Error, Result};
use crate::ops::{conv_out_size, Activation, NormKind};
use crate::random::{keyed, trunc_normal};
use crate::tensor::{Shape, Tensor};

/// Standard deviation of the truncated-normal conv weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv(ConvSpec),
    Norm { kind: NormKind, channels: usize },
    Act(Activation),
}

/// One executed layer with its resolved shapes and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub path: String,
    pub op: LayerOp,
    pub input: Shape,
    pub output: Shape,
    pub macs: u64,
}

impl LayerSpec {
    /// Trainable scalars owned by this layer.
    pub fn params(&self) -> usize {
        match self.op {
            LayerOp::Conv(c) => c.param_count(),
            LayerOp::Norm { channels, .. } => 2 * channels,
            LayerOp::Act(_) => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.op {
            LayerOp::Conv(c) if c.groups > 1 => "dwconv",
            LayerOp::Conv(_) => "conv",
            LayerOp::Norm { kind: NormKind::Batch, .. } => "bn",
            LayerOp::Norm { kind: NormKind::Layer, .. } => "ln",
            LayerOp::Act(a) => a.name(),
        }
    }
}

/// Shape-only backend. Records every conv, norm and activation with its
/// multiply-accumulate count: conv `n*oh*ow*out*(in/groups)*k*k`, norms and
/// activations one per element.
#[derive(Debug, Default)]
pub struct Tracer {
    shapes: Vec<Shape>,
    pub layers: Vec<LayerSpec>,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, shape: Shape) -> usize {
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    fn push(&mut self, s: Shape) -> usize {
        self.input(s)
    }

    fn same(&self, op: &'static str, a: usize, b: usize) -> Result<Shape> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    fn record(&mut self, path: &str, op: LayerOp, input: Shape, output: Shape, macs: u64) -> usize {
        self.layers.push(LayerSpec {
            path: path.to_string(),
            op,
            input,
            output,
            macs,
        });
        self.push(output)
    }
}

impl Backend for Tracer {
    type X = usize;

    fn shape(&self, x: usize) -> Shape {
        self.shapes[x]
    }

    fn conv(&mut self, path: &str, x: usize, spec: &ConvSpec) -> Result<usize> {
        let s = self.shapes[x];
        if s.c != spec.in_ch || spec.in_ch % spec.groups != 0 || spec.out_ch % spec.groups != 0 {
            return Err(Error::shape("conv", format!("{path}: {spec:?} on {s}")));
        }
        let size = |v| conv_out_size(v, spec.kernel, 1, spec.padding(), spec.dilation);
        let (oh, ow) = match (size(s.h), size(s.w)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv", format!("{path}: kernel does not fit {s}"))),
        };
        let out = Shape::new(s.n, spec.out_ch, oh, ow);
        let macs = (out.numel() * (spec.in_ch / spec.groups) * spec.kernel * spec.kernel) as u64;
        Ok(self.record(path, LayerOp::Conv(*spec), s, out, macs))
    }

    fn norm(&mut self, path: &str, x: usize, kind: NormKind) -> Result<usize> {
        let s = self.shapes[x];
        Ok(self.record(path, LayerOp::Norm { kind, channels: s.c }, s, s, s.numel() as u64))
    }

    fn act(&mut self, path: &str, x: usize, kind: Activation) -> Result<usize> {
        let s = self.shapes[x];
        Ok(self.record(path, LayerOp::Act(kind), s, s, s.numel() as u64))
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let s = self.same("add", a, b)?;
        Ok(self.push(s))
    }

    fn mul(&mut self, a: usize, b: usize) -> Result<usize> {
        let s = self.same("mul", a, b)?;
        Ok(self.push(s))
    }

    fn mul_channel(&mut self, x: usize, gate: usize) -> Result<usize> {
        let (s, g) = (self.shapes[x], self.shapes[gate]);
        if g != Shape::new(s.n, s.c, 1, 1) {
            return Err(Error::shape("mul_channel", format!("gate {g} for {s}")));
        }
        Ok(self.push(s))
    }

    fn concat_channels(&mut self, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", format!("{sa} vs {sb}")));
        }
        Ok(self.push(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)))
    }

    fn concat_batch(&mut self, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        if (sa.c, sa.h, sa.w) != (sb.c, sb.h, sb.w) {
            return Err(Error::shape("concat_batch", format!("{sa} vs {sb}")));
        }
        Ok(self.push(Shape::new(sa.n + sb.n, sa.c, sa.h, sa.w)))
    }

    fn split_pair(&mut self, x: usize) -> Result<(usize, usize)> {
        let s = self.shapes[x];
        if s.n % 2 != 0 {
            return Err(Error::shape("split_pair", format!("odd batch {s}")));
        }
        let half = Shape::new(s.n / 2, s.c, s.h, s.w);
        Ok((self.push(half), self.push(half)))
    }

    fn global_avg_pool(&mut self, x: usize) -> Result<usize> {
        let s = self.shapes[x];
        Ok(self.push(Shape::new(s.n, s.c, 1, 1)))
    }

    fn maxpool2(&mut self, x: usize) -> Result<usize> {
        let s = self.shapes[x];
        if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape("maxpool2", format!("spatial dims of {s} must be even and non-zero")));
        }
        Ok(self.push(Shape::new(s.n, s.c, s.h / 2, s.w / 2)))
    }

    fn bilinear(&mut self, x: usize, target: (usize, usize)) -> Result<usize> {
        let s = self.shapes[x];
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidArgument(format!("resample target {target:?} is empty")));
        }
        Ok(self.push(Shape::new(s.n, s.c, target.0, target.1)))
    }

    fn droppath(&mut self, x: usize, _rate: f64) -> Result<usize> {
        Ok(x)
    }
}

/// Fresh parameters for every layer in `layers`.
///
/// Conv weights are truncated normal with std [`INIT_STD`], biases zero,
/// norm gamma one and beta zero; batch-norm running mean and variance start
/// at zero and one. Each tensor draws from its own path-keyed stream, so a
/// tensor's initial value depends only on `(seed, path)`.
pub fn init_params(layers: &[LayerSpec], seed: u64) -> Result<BTreeMap<String, Param>> {
    let mut out = BTreeMap::new();
    let mut put = |path: String, kind: ParamKind, value: Tensor<f32>| -> Result<()> {
        match out.get(&path) {
            Some(Param { value: v, .. }) if v.shape() != value.shape() => Err(Error::shape(
                "init_params",
                format!("{path} declared as {} and {}", v.shape(), value.shape()),
            )),
            _ => {
                out.insert(path, Param { kind, value });
                Ok(())
            }
        }
    };
    for l in layers {
        match l.op {
            LayerOp::Conv(c) => {
                let key = format!("{}.weight", l.path);
                let mut rng = keyed(seed, &key);
                let w = Tensor::from_fn(c.weight_shape(), |_| trunc_normal(&mut rng, INIT_STD) as f32);
                put(key, ParamKind::ConvWeight, w)?;
                if c.bias {
                    put(format!("{}.bias", l.path), ParamKind::Bias, Tensor::zeros(Shape::vector(c.out_ch)))?;
                }
            }
            LayerOp::Norm { kind, channels } => {
                let v = Shape::vector(channels);
                put(format!("{}.gamma", l.path), ParamKind::NormAffine, Tensor::ones(v))?;
                put(format!("{}.beta", l.path), ParamKind::NormAffine, Tensor::zeros(v))?;
                if kind == NormKind::Batch {
                    put(format!("{}.running_mean", l.path), ParamKind::RunningStat, Tensor::zeros(v))?;
                    put(format!("{}.running_var", l.path), ParamKind::RunningStat, Tensor::ones(v))?;
                }
            }
            LayerOp::Act(_) => {}
        }
    }
    Ok(out)
}
