//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradients;

use schanger_core::autograd::Tape;
use schanger_core::blocks::{init_params, Ctx, Tracer};
use schanger_core::data_io::{Checkpoint, Metadata, ParamKind};
use schanger_core::random::{keyed, rand_tensor};
use schanger_core::{Result, Shape, Tensor};

/// Parameters of a traced block with well-conditioned random values: weights
/// and biases uniform in [-0.5, 0.5), gamma near one, positive running
/// variances.
pub fn block_params(trace: &dyn Fn(&mut Tracer) -> Result<()>, seed: u64) -> Checkpoint {
    let mut tr = Tracer::new();
    trace(&mut tr).unwrap();
    let mut ckpt = Checkpoint::new(Metadata::default());
    for (path, mut p) in init_params(&tr.layers, seed).unwrap() {
        let r: Tensor<f32> = rand_tensor(&mut keyed(seed, &path), p.value.shape());
        p.value = match p.kind {
            ParamKind::ConvWeight | ParamKind::Bias => r.map(|v| 0.5 * v),
            ParamKind::NormAffine if path.ends_with("gamma") => r.map(|v| 1.0 + 0.3 * v),
            ParamKind::NormAffine => r.map(|v| 0.3 * v),
            ParamKind::RunningStat if path.ends_with("running_var") => r.map(|v| 1.0 + 0.5 * v),
            ParamKind::RunningStat => r.map(|v| 0.2 * v),
        };
        ckpt.tensors.insert(path, p);
    }
    ckpt
}

/// Trainable scalars of a traced block.
pub fn traced_params(trace: &dyn Fn(&mut Tracer) -> Result<()>) -> usize {
    let mut tr = Tracer::new();
    trace(&mut tr).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    tr.layers.iter().filter(|l| seen.insert(l.path.clone())).map(|l| l.params()).sum()
}

pub fn fill(ckpt: &mut Checkpoint, path: &str, v: f32) {
    let p = ckpt.get_mut(path).unwrap();
    p.value = Tensor::full(p.value.shape(), v);
}

pub fn rand_input(seed: u64, key: &str, s: Shape) -> Tensor<f32> {
    rand_tensor(&mut keyed(seed, key), s)
}

/// Runs a block in eval mode on f32 and returns the output tensors.
pub fn run_eval(
    ckpt: &Checkpoint,
    inputs: &[&Tensor<f32>],
    f: impl FnOnce(&mut Ctx<'_, f32>, &[schanger_core::autograd::Var]) -> Result<Vec<schanger_core::autograd::Var>>,
) -> Result<Vec<Tensor<f32>>> {
    let mut tape = Tape::<f32>::new();
    let outs = {
        let mut ctx = Ctx::eval(&mut tape, ckpt);
        let vars: Vec<_> = inputs.iter().map(|t| ctx.input(t)).collect();
        f(&mut ctx, &vars)?
    };
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}
