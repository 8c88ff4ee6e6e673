use std::collections::HashMap;

use super::{Backend, ConvSpec};
use crate::autograd::{Tape, Var};
use crate::data_io::Checkpoint;
use crate::error::{Error, Result};
use crate::ops::{self, Activation, ConvParams, NormKind, NormParams, Resample};
use crate::random::{seeded, SeededRng};
use crate::tensor::{Real, Shape, Tensor};

/// Executes blocks on a tape, reading parameters from a checkpoint.
///
/// Parameter leaves are created once per path and reused, so a path used
/// twice accumulates both gradient contributions. In training mode batch-norm
/// running statistics are written back to the checkpoint as they are updated.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: Store<'a>,
    leaves: HashMap<String, Var>,
    training: bool,
    track_grads: bool,
    rng: SeededRng,
}

enum Store<'a> {
    Shared(&'a Checkpoint),
    Exclusive(&'a mut Checkpoint),
}

impl Store<'_> {
    fn get(&self) -> &Checkpoint {
        match self {
            Store::Shared(c) => c,
            Store::Exclusive(c) => c,
        }
    }
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Parameters require gradients iff `training`; see [`Ctx::track_grads`].
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut Checkpoint, training: bool, seed: u64) -> Self {
        Ctx {
            tape,
            store: Store::Exclusive(store),
            leaves: HashMap::new(),
            training,
            track_grads: training,
            rng: seeded(seed),
        }
    }

    /// Inference over a borrowed checkpoint. Never writes to it.
    pub fn eval(tape: &'a mut Tape<T>, store: &'a Checkpoint) -> Self {
        Ctx {
            tape,
            store: Store::Shared(store),
            leaves: HashMap::new(),
            training: false,
            track_grads: false,
            rng: seeded(0),
        }
    }

    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Uses `var` for parameter `path` instead of the checkpoint value.
    pub fn bind(&mut self, path: impl Into<String>, var: Var) {
        self.leaves.insert(path.into(), var);
    }

    /// Parameter leaves created or bound so far.
    pub fn leaves(&self) -> &HashMap<String, Var> {
        &self.leaves
    }

    pub fn input(&mut self, t: &Tensor<f32>) -> Var {
        self.tape.constant(t.cast())
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(path) {
            return Ok(v);
        }
        let p = self.store.get().get(path)?;
        let v = self.tape.leaf(p.value.cast(), self.track_grads && p.kind.trainable());
        self.leaves.insert(path.to_string(), v);
        Ok(v)
    }

    fn running(&self, path: &str) -> Result<Vec<T>> {
        Ok(self.store.get().get(path)?.value.data().iter().map(|&v| T::from_f64(v as f64)).collect())
    }
}

impl<T: Real> Backend for Ctx<'_, T> {
    type X = Var;

    fn shape(&self, x: Var) -> Shape {
        self.tape.shape(x)
    }

    fn conv(&mut self, path: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
        let s = self.tape.shape(x);
        if s.c != spec.in_ch {
            return Err(Error::shape("conv", format!("{path} expects {} channels, got {s}", spec.in_ch)));
        }
        let weight = self.param(&format!("{path}.weight"))?;
        if self.tape.shape(weight) != spec.weight_shape() {
            return Err(Error::shape(
                "conv",
                format!("{path}.weight is {}, layer needs {}", self.tape.shape(weight), spec.weight_shape()),
            ));
        }
        let bias = if spec.bias { Some(self.param(&format!("{path}.bias"))?) } else { None };
        let p = ConvParams::new(weight, bias)
            .padding(spec.padding())
            .dilation(spec.dilation)
            .groups(spec.groups);
        ops::conv2d(self.tape, x, &p)
    }

    fn norm(&mut self, path: &str, x: Var, kind: NormKind) -> Result<Var> {
        let gamma = self.param(&format!("{path}.gamma"))?;
        let beta = self.param(&format!("{path}.beta"))?;
        match kind {
            NormKind::Layer => ops::normalize(self.tape, x, &mut NormParams::affine(gamma, beta), kind, self.training),
            NormKind::Batch => {
                let (mk, vk) = (format!("{path}.running_mean"), format!("{path}.running_var"));
                let mut p = NormParams::with_running(gamma, beta, self.running(&mk)?, self.running(&vk)?);
                let y = ops::normalize(self.tape, x, &mut p, kind, self.training)?;
                if self.training {
                    let Store::Exclusive(store) = &mut self.store else {
                        return Err(Error::InvalidArgument("training needs an exclusive checkpoint".into()));
                    };
                    for (key, vals) in [(mk, &p.running_mean), (vk, &p.running_var)] {
                        let dst = store.get_mut(&key)?;
                        for (d, v) in dst.value.data_mut().iter_mut().zip(vals) {
                            *d = v.as_f64() as f32;
                        }
                    }
                }
                Ok(y)
            }
        }
    }

    fn act(&mut self, _path: &str, x: Var, kind: Activation) -> Result<Var> {
        ops::activation(self.tape, x, kind)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ops::add(self.tape, a, b)
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ops::mul(self.tape, a, b)
    }

    fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        ops::mul_channel(self.tape, x, gate)
    }

    fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        ops::concat_channels(self.tape, a, b)
    }

    fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        ops::concat_batch(self.tape, a, b)
    }

    fn split_pair(&mut self, x: Var) -> Result<(Var, Var)> {
        ops::split_pair(self.tape, x)
    }

    fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        ops::global_avg_pool(self.tape, x)
    }

    fn maxpool2(&mut self, x: Var) -> Result<Var> {
        ops::maxpool2(self.tape, x)
    }

    fn bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        ops::resample(self.tape, x, Resample::Bilinear, target)
    }

    fn droppath(&mut self, x: Var, rate: f64) -> Result<Var> {
        // a branch dropped with certainty has no survivors to rescale
        if rate == 1.0 && self.training {
            return ops::scale(self.tape, x, 0.0);
        }
        ops::droppath(self.tape, x, rate, self.training, &mut self.rng)
    }
}
