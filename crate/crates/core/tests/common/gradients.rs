//! Finite-difference checks of every differentiable op and block in f64.
//! Each check returns the worst relative error over all seeds and cases.

use schanger_core::autograd::{Tape, Var};
use schanger_core::blocks::{ffn, lfem, msfsh, scam, sclka, se, stem, tfm, vanm, AttnConfig, Ctx, LfemConfig, SclkaConfig, Tracer};
use schanger_core::blocks::Backend;
use schanger_core::gradcheck::grad_check;
use schanger_core::ops::{self, Activation, ConvParams, NormKind, NormParams};
use schanger_core::random::{keyed, rand_tensor, seeded};
use schanger_core::training::bce_dice_loss;
use schanger_core::{Result, Shape, Tensor};

pub const SEEDS: u64 = 20;

/// Worst relative error per named case.
pub type Cases = Vec<(String, f64)>;

/// Primitive-op checks, held to [`OP_TOL`].
pub fn all_ops() -> Cases {
    let mut r = Cases::new();
    conv2d_variants(&mut r);
    normalization_modes(&mut r);
    activations(&mut r);
    elementwise_and_layout_ops(&mut r);
    resampling(&mut r);
    bce_dice(&mut r);
    r
}

/// Block checks, held to [`BLOCK_TOL`].
pub fn all_blocks() -> Cases {
    let mut r = Cases::new();
    block_stem(&mut r);
    block_se(&mut r);
    block_lfem(&mut r);
    block_tfm_and_sclka(&mut r);
    block_attention(&mut r);
    block_msfsh(&mut r);
    r
}
const EPS: f64 = 1e-5;
/// Larger step for blocks: some parameters (a conv bias feeding batch norm)
/// have an exactly zero gradient, and the 1e-8 relative-error floor leaves no
/// room for round-off in a small-step difference.
const BLOCK_EPS: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-3;
pub const BLOCK_TOL: f64 = 1e-2;

fn rand(seed: u64, key: &str, s: Shape) -> Tensor<f64> {
    rand_tensor(&mut keyed(seed, key), s)
}

/// Weighted sum with fixed random weights, so that outputs whose plain sum is
/// constant (normalisation) still have informative gradients.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand(seed, "projection", tape.shape(y)));
    let p = ops::mul(tape, y, w)?;
    ops::sum_all(tape, p)
}

fn check_op(r: &mut Cases, name: &str, inputs: impl Fn(u64) -> Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let err = grad_check(
            |tape, v| {
                let y = f(tape, v)?;
                project(tape, y, seed)
            },
            &inputs(seed),
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    r.push((name.to_string(), worst));
}

fn conv2d_variants(r: &mut Cases) {
    // (in, out, k, stride, pad, dil, groups, bias)
    let cases = [
        (3, 4, 3, 1, 1, 1, 1, true),
        (4, 4, 3, 2, 1, 1, 1, false),
        (4, 4, 5, 1, 2, 1, 4, true),
        (4, 4, 3, 1, 3, 3, 4, true),
        (4, 2, 1, 1, 0, 1, 1, true),
        (4, 6, 3, 1, 1, 1, 2, false),
    ];
    for (i, &(cin, cout, k, stride, pad, dil, groups, bias)) in cases.iter().enumerate() {
        check_op(r, 
            &format!("conv2d case {i}"),
            |seed| {
                let mut v = vec![
                    rand(seed, "x", Shape::new(1, cin, 7, 7)),
                    rand(seed, "w", Shape::new(cout, cin / groups, k, k)),
                ];
                if bias {
                    v.push(rand(seed, "b", Shape::vector(cout)));
                }
                v
            },
            |tape, v| {
                let p = ConvParams::new(v[1], v.get(2).copied()).stride(stride).padding(pad).dilation(dil).groups(groups);
                ops::conv2d(tape, v[0], &p)
            },
        );
    }
}

fn normalization_modes(r: &mut Cases) {
    let s = Shape::new(2, 3, 4, 4);
    for (kind, training) in [(NormKind::Batch, true), (NormKind::Batch, false), (NormKind::Layer, true)] {
        check_op(r, 
            &format!("{kind:?} training={training}"),
            |seed| vec![rand(seed, "x", s), rand(seed, "g", Shape::vector(3)), rand(seed, "b", Shape::vector(3))],
            |tape, v| {
                let mut p = NormParams::with_running(v[1], v[2], vec![0.1, -0.2, 0.3], vec![0.5, 1.0, 2.0]);
                ops::normalize(tape, v[0], &mut p, kind, training)
            },
        );
    }
}

fn activations(r: &mut Cases) {
    for kind in [Activation::Gelu, Activation::Silu, Activation::Sigmoid] {
        check_op(r, 
            kind.name(),
            |seed| vec![rand(seed, "x", Shape::new(1, 2, 4, 4)).map(|v| 3.0 * v)],
            |tape, v| ops::activation(tape, v[0], kind),
        );
    }
}

fn elementwise_and_layout_ops(r: &mut Cases) {
    let s = Shape::new(2, 3, 4, 4);
    let two = |seed| vec![rand(seed, "a", s), rand(seed, "b", s)];
    check_op(r, "add", two, |t, v| ops::add(t, v[0], v[1]));
    check_op(r, "mul", two, |t, v| ops::mul(t, v[0], v[1]));
    check_op(r, "concat_channels", two, |t, v| ops::concat_channels(t, v[0], v[1]));
    check_op(r, "concat_batch", two, |t, v| ops::concat_batch(t, v[0], v[1]));
    let one = |seed| vec![rand(seed, "a", s)];
    check_op(r, "slice_channels", one, |t, v| ops::slice_channels(t, v[0], 1, 2));
    check_op(r, "slice_batch", one, |t, v| ops::slice_batch(t, v[0], 1, 1));
    check_op(r, "split_pair", one, |t, v| {
        let (a, b) = ops::split_pair(t, v[0])?;
        let b = ops::scale(t, b, -2.0)?;
        ops::add(t, a, b)
    });
    check_op(r, "scale", one, |t, v| ops::scale(t, v[0], 0.7));
    check_op(r, "global_avg_pool", one, |t, v| ops::global_avg_pool(t, v[0]));
    check_op(r, 
        "mul_channel",
        |seed| vec![rand(seed, "x", s), rand(seed, "g", Shape::new(2, 3, 1, 1))],
        |t, v| ops::mul_channel(t, v[0], v[1]),
    );
    check_op(r, "droppath", one, |t, v| ops::droppath(t, v[0], 0.5, true, &mut seeded(9)));
}

fn resampling(r: &mut Cases) {
    let s = Shape::new(1, 2, 6, 6);
    check_op(r, "maxpool2", |seed| vec![rand(seed, "x", s)], |t, v| ops::maxpool2(t, v[0]));
    for target in [(12, 12), (3, 3), (5, 9)] {
        check_op(r, &format!("bilinear {target:?}"), |seed| vec![rand(seed, "x", s)], |t, v| ops::bilinear(t, v[0], target));
    }
}

fn bce_dice(r: &mut Cases) {
    let s = Shape::new(2, 1, 4, 4);
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let y = rand(seed, "y", s).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let err = grad_check(|t, v| bce_dice_loss(t, v[0], &y, 1.0), &[rand(seed, "z", s).map(|v| 3.0 * v)], EPS).unwrap();
        worst = worst.max(err);
    }
    r.push(("bce_dice".into(), worst));
}

/// A block under test: builds its output from one or two inputs.
type BlockFn<'a> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'a;

/// Checks gradients of the block output with respect to its inputs and every
/// trainable parameter, in both training and eval mode.
fn check_block(r: &mut Cases, name: &str, input_shapes: &[Shape], trace: &dyn Fn(&mut Tracer) -> Result<()>, f: &BlockFn<'_>) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let ckpt = super::block_params(trace, seed);
        let trainable = ckpt.trainable_paths();
        let mut inputs: Vec<Tensor<f64>> = input_shapes.iter().enumerate().map(|(i, &s)| rand(seed, &format!("in{i}"), s)).collect();
        inputs.extend(trainable.iter().map(|p| ckpt.get(p).unwrap().value.cast()));
        for training in [true, false] {
            let err = grad_check(
                |tape, v| {
                    let mut store = ckpt.clone();
                    let y = {
                        let mut ctx = Ctx::new(tape, &mut store, training, seed);
                        for (path, &var) in trainable.iter().zip(&v[input_shapes.len()..]) {
                            ctx.bind(path.clone(), var);
                        }
                        f(&mut ctx, &v[..input_shapes.len()])?
                    };
                    project(tape, y, seed)
                },
                &inputs,
                BLOCK_EPS,
            )
            .unwrap();
            worst = worst.max(err);
        }
    }
    r.push((name.to_string(), worst));
}

fn single(c: usize) -> Shape {
    Shape::new(1, c, 8, 8)
}

fn block_stem(r: &mut Cases) {
    let s = Shape::new(2, 3, 8, 8);
    check_block(r, 
        "stem",
        &[s],
        &|tr| {
            let x = tr.input(s);
            stem(tr, "stem", x, 4).map(drop)
        },
        &|ctx, v| stem(ctx, "stem", v[0], 4),
    );
}

fn block_se(r: &mut Cases) {
    let s = Shape::new(2, 8, 4, 4);
    check_block(r, 
        "se",
        &[s],
        &|tr| {
            let x = tr.input(s);
            se(tr, "se", x, 2).map(drop)
        },
        &|ctx, v| se(ctx, "se", v[0], 2),
    );
}

fn block_lfem(r: &mut Cases) {
    for (cin, cout) in [(4, 4), (4, 8)] {
        let cfg = LfemConfig::new(cin, cout);
        let s = Shape::new(2, cin, 6, 6);
        check_block(r, 
            &format!("lfem {cin}->{cout}"),
            &[s],
            &|tr| {
                let x = tr.input(s);
                lfem(tr, "l", x, &cfg).map(drop)
            },
            &|ctx, v| lfem(ctx, "l", v[0], &cfg),
        );
    }
}

fn block_tfm_and_sclka(r: &mut Cases) {
    let s = single(4);
    check_block(r, 
        "tfm",
        &[s, s],
        &|tr| {
            let (a, b) = (tr.input(s), tr.input(s));
            tfm(tr, "t", a, b).map(drop)
        },
        &|ctx, v| tfm(ctx, "t", v[0], v[1]),
    );
    let cfg = SclkaConfig::new(4);
    check_block(r, 
        "sclka",
        &[s, s],
        &|tr| {
            let (a, b) = (tr.input(s), tr.input(s));
            sclka(tr, "s", a, b, &cfg).map(drop)
        },
        &|ctx, v| {
            let (y1, y2) = sclka(ctx, "s", v[0], v[1], &cfg)?;
            let y2 = ops::scale(ctx.tape, y2, 0.5)?;
            ctx.add(y1, y2)
        },
    );
}

fn block_attention(r: &mut Cases) {
    let cfg = AttnConfig::new(4, 2);
    let s = single(4);
    check_block(r, 
        "ffn",
        &[s],
        &|tr| {
            let x = tr.input(s);
            ffn(tr, "f", x, 2).map(drop)
        },
        &|ctx, v| ffn(ctx, "f", v[0], 2),
    );
    check_block(r, 
        "vanm",
        &[Shape::new(2, 4, 8, 8)],
        &|tr| {
            let x = tr.input(Shape::new(2, 4, 8, 8));
            vanm(tr, "v", x, &cfg).map(drop)
        },
        &|ctx, v| vanm(ctx, "v", v[0], &cfg),
    );
    check_block(r, 
        "scam",
        &[s, s],
        &|tr| {
            let (a, b) = (tr.input(s), tr.input(s));
            scam(tr, "c", a, b, &cfg).map(drop)
        },
        &|ctx, v| {
            let (y1, y2) = scam(ctx, "c", v[0], v[1], &cfg)?;
            let y2 = ops::scale(ctx.tape, y2, -0.5)?;
            ctx.add(y1, y2)
        },
    );
}

fn block_msfsh(r: &mut Cases) {
    let shapes = [Shape::new(1, 2, 8, 8), Shape::new(1, 3, 4, 4), Shape::new(1, 2, 2, 2), Shape::new(1, 2, 2, 2), Shape::new(1, 2, 1, 1)];
    check_block(r, 
        "msfsh",
        &shapes,
        &|tr| {
            let f: Vec<usize> = shapes.iter().map(|&s| tr.input(s)).collect();
            msfsh(tr, "h", &f, (8, 8)).map(drop)
        },
        &|ctx, v| {
            let outs = msfsh(ctx, "h", v, (8, 8))?;
            let mut acc = outs[5];
            for (i, &o) in outs[..5].iter().enumerate() {
                let o = ops::scale(ctx.tape, o, 0.1 * (i + 1) as f64)?;
                acc = ctx.add(acc, o)?;
            }
            Ok(acc)
        },
    );
}
