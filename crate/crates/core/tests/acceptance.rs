//! Acceptance suite. Every criterion runs in turn, prints one PASS/FAIL line
//! and the test fails at the end if any criterion failed.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use schanger_core::analysis::{count_params, delta_params, reference, FlopsConvention, VariantReport};
use schanger_core::autograd::Tape;
use schanger_core::blocks::{sclka, Ctx, SclkaConfig, Tracer};
use schanger_core::data_io::{
    decode_checkpoint, encode_checkpoint, few_shot_subset, synth_generate, Checkpoint, Metadata, ParamKind, Sample,
    SamplePair, FORMAT_VERSION,
};
use schanger_core::evaluation::{evaluate, metrics, ConfusionCounts, EvalData};
use schanger_core::networks::{build_schanger, build_spnet, is_tfm_path, Mode, ModelGraph, VariantConfig};
use schanger_core::ops;
use schanger_core::random::{keyed, rand_tensor, seeded};
use schanger_core::scn::inflate;
use schanger_core::training::{
    bce_dice_terms, ema_update, lr_schedule, train, AugmentationConfig, EmaState, TrainData, TrainSetup,
};
use schanger_core::{Error, Shape, Tensor};

use common::gradients::{all_blocks, all_ops, BLOCK_TOL, OP_TOL, SEEDS};

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);

fn say(line: &str) {
    // straight to the handle so the harness does not capture it
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn criterion(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = ok && in_time;
    let timing = format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs());
    let late = if in_time { "" } else { " [over time budget]" };
    say(&format!("{} [{id:>2}] {name} ({timing}){late}: {detail}", if pass { "PASS" } else { "FAIL" }));
    pass
}

const PARAM_REL_TOL: f64 = 0.05;

fn parameter_reconciliation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for cfg in [VariantConfig::small(), VariantConfig::base()] {
        let target = reference(cfg.name).params_m * 1e6;
        let (g, ckpt) = build_schanger(&cfg, 0).unwrap();
        let counted = count_params(&g).totals.params;
        let rel = (counted as f64 - target).abs() / target;
        ok &= rel <= PARAM_REL_TOL && counted == ckpt.scalar_count();
        parts.push(format!(
            "{} {counted} vs {target:.0} ({:+.2}%), checkpoint {}",
            cfg.name,
            100.0 * (counted as f64 / target - 1.0),
            ckpt.scalar_count()
        ));
    }
    (ok, parts.join("; "))
}

const DELTA_RANGE: (f64, f64) = (0.037, 0.055);

fn delta_reconciliation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for cfg in [VariantConfig::small(), VariantConfig::base()] {
        let (_, sp) = build_spnet(&cfg, 1).unwrap();
        let (_, rep) = inflate(&sp, &cfg, 1).unwrap();
        let sc = ModelGraph::new(Mode::Schanger, cfg).unwrap();
        let analysed = delta_params(&sc);
        let frac = analysed as f64 / count_params(&sc).totals.params as f64;
        ok &= (DELTA_RANGE.0..=DELTA_RANGE.1).contains(&frac) && analysed == rep.new_param_count;
        parts.push(format!(
            "{} {:.2}% (published {:.1}%), analysis {analysed} vs inflation {}",
            cfg.name,
            100.0 * frac,
            100.0 * reference(cfg.name).delta_fraction,
            rep.new_param_count
        ));
    }
    (ok, parts.join("; "))
}

const FLOPS_REL_TOL: f64 = 0.15;

fn flops_reconciliation() -> Outcome {
    let reports: Vec<VariantReport> =
        [VariantConfig::small(), VariantConfig::base()].iter().map(|c| VariantReport::new(c).unwrap()).collect();
    let mut parts = Vec::new();
    let mut any = false;
    for conv in FlopsConvention::ALL {
        let mut all = true;
        let mut row = Vec::new();
        for r in &reports {
            let target = reference(r.variant.name).flops_g;
            let got = r.flops(conv) as f64 / 1e9;
            all &= (got - target).abs() / target <= FLOPS_REL_TOL;
            row.push(format!("{} {got:.3}G vs {target}G", r.variant.name));
        }
        any |= all;
        parts.push(format!("{} [{}]: {}", conv.name(), if all { "within" } else { "outside" }, row.join(", ")));
    }
    (any, parts.join("; "))
}

fn gradient_verification() -> Outcome {
    let ops = all_ops();
    let blocks = all_blocks();
    let worst = |c: &[(String, f64)]| c.iter().cloned().fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let (wo, wb) = (worst(&ops), worst(&blocks));
    let failing: Vec<String> = ops
        .iter()
        .filter(|c| !(c.1 < OP_TOL))
        .chain(blocks.iter().filter(|c| !(c.1 < BLOCK_TOL)))
        .map(|c| format!("{} {:.2e}", c.0, c.1))
        .collect();
    let detail = format!(
        "{} op cases worst {} {:.2e} (< {OP_TOL:.0e}); {} block cases worst {} {:.2e} (< {BLOCK_TOL:.0e}); {SEEDS} seeds{}",
        ops.len(),
        wo.0,
        wo.1,
        blocks.len(),
        wb.0,
        wb.1,
        if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
    );
    (failing.is_empty(), detail)
}

const INVARIANCE_TOL: f64 = 1e-6;
const INVARIANCE_INSTANCES: u64 = 100;
/// Radius of the intended 21 x 21 attention window.
const EXPECTED_RADIUS: usize = 10;

fn sclka_params(c: usize, s: Shape, seed: u64) -> Checkpoint {
    let cfg = SclkaConfig::new(c);
    common::block_params(
        &|tr: &mut Tracer| {
            let (a, b) = (tr.input(s), tr.input(s));
            sclka(tr, "s", a, b, &cfg).map(drop)
        },
        seed,
    )
}

/// Chebyshev radius of the region of `x1` that influences the centre pixel
/// of `y1`, read off the support of the gradient.
fn probe_radius(size: usize, seed: u64) -> usize {
    let c = 2;
    let s = Shape::new(1, c, size, size);
    let ckpt = sclka_params(c, s, seed);
    let cfg = SclkaConfig::new(c);
    let mut tape = Tape::<f64>::new();
    let x1 = tape.leaf(rand_tensor(&mut keyed(seed, "x1"), s), true);
    let x2 = tape.constant(rand_tensor(&mut keyed(seed, "x2"), s));
    let (y1, _) = {
        let mut ctx = Ctx::eval(&mut tape, &ckpt);
        sclka(&mut ctx, "s", x1, x2, &cfg).unwrap()
    };
    let mid = size / 2;
    let pick = tape.constant(Tensor::from_fn(s, |[_, _, h, w]| if h == mid && w == mid { 1.0 } else { 0.0 }));
    let centre = ops::mul(&mut tape, y1, pick).unwrap();
    let loss = ops::sum_all(&mut tape, centre).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x1).unwrap();
    let mut radius = 0;
    for ch in 0..c {
        for h in 0..size {
            for w in 0..size {
                if g.at(0, ch, h, w) != 0.0 {
                    radius = radius.max(h.abs_diff(mid)).max(w.abs_diff(mid));
                }
            }
        }
    }
    radius
}

fn shared_attention() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..INVARIANCE_INSTANCES {
        let mut rng = seeded(seed);
        let c = rng.gen_range(1..=6);
        let s = Shape::new(rng.gen_range(1..=2), c, rng.gen_range(4..=12), rng.gen_range(4..=12));
        let ckpt = sclka_params(c, s, seed);
        let cfg = SclkaConfig::new(c);
        let mut tape = Tape::<f64>::new();
        let x1 = tape.constant(rand_tensor(&mut keyed(seed, "x1"), s));
        let x2 = tape.constant(rand_tensor(&mut keyed(seed, "x2"), s));
        let (y1, y2) = {
            let mut ctx = Ctx::eval(&mut tape, &ckpt);
            sclka(&mut ctx, "s", x1, x2, &cfg).unwrap()
        };
        let a = ops::mul(&mut tape, y1, x2).unwrap();
        let b = ops::mul(&mut tape, y2, x1).unwrap();
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b)));
    }
    let invariant = worst <= INVARIANCE_TOL;
    let cfg = SclkaConfig::new(1);
    let measured: Vec<usize> = (0..3).map(|seed| probe_radius(33, seed)).collect();
    let radius_ok = measured.iter().all(|&r| r == EXPECTED_RADIUS);
    let detail = format!(
        "max |y1*x2 - y2*x1| {worst:.1e} over {INVARIANCE_INSTANCES} instances (<= {INVARIANCE_TOL:.0e}); \
         probed radius {measured:?} with k1={} k2={} d={}, expected {EXPECTED_RADIUS}{}",
        cfg.k1,
        cfg.k2,
        cfg.d,
        if radius_ok {
            String::new()
        } else {
            format!(
                " (k1/2 + d*(k2/2) = {} + {} = {}, a {}x{} window)",
                (cfg.k1 - 1) / 2,
                cfg.d * (cfg.k2 - 1) / 2,
                cfg.radius(),
                2 * cfg.radius() + 1,
                2 * cfg.radius() + 1
            )
        }
    );
    (invariant && radius_ok, detail)
}

fn weight_inflation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for cfg in [VariantConfig::small(), VariantConfig::base()] {
        let (_, mut sp) = build_spnet(&cfg, 5).unwrap();
        // make every source tensor distinct from any fresh initialisation
        for (i, p) in sp.tensors.values_mut().enumerate() {
            let shift = 0.25 + 0.01 * (i % 13) as f32;
            p.value = p.value.map(|v| v + shift);
        }
        let (sc, rep) = inflate(&sp, &cfg, 5).unwrap();
        let copied_exact = rep.copied_paths.iter().all(|p| {
            let (a, b) = (&sc.get(p).unwrap().value, &sp.get(p).unwrap().value);
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let covers_source = sp.paths().all(|p| rep.copied_paths.iter().any(|c| c == p));
        let only_tfm = rep.new_paths.iter().all(|p| is_tfm_path(p)) && !rep.new_paths.is_empty();
        let (again, rep2) = inflate(&sp, &cfg, 5).unwrap();
        let idempotent = again == sc && rep2 == rep;
        ok &= copied_exact && covers_source && only_tfm && idempotent;
        parts.push(format!(
            "{}: {} copied bit-identical={copied_exact}, {} new all-fusion={only_tfm}, idempotent={idempotent}",
            cfg.name,
            rep.copied_paths.len(),
            rep.new_paths.len()
        ));
    }
    (ok, parts.join("; "))
}

const SYNTH_SEED: u64 = 42;
const SYNTH_TRAIN: usize = 200;
const SYNTH_HELD: usize = 50;
const SYNTH_SIZE: usize = 64;
const SYNTH_DENSITY: f64 = 0.1;
const PRETRAIN_EPOCHS: usize = 30;
const FINETUNE_EPOCHS: usize = 10;
const E2E_LR: f64 = 2e-3;
const TRAIN_F1_MIN: f64 = 0.95;
const HELD_F1_MIN: f64 = 0.85;
const COMPARE_SEEDS: u64 = 5;
const COMPARE_WINS_MIN: usize = 4;
const COMPARE_FRACTION: f64 = 0.2;
const COMPARE_EPOCHS: usize = 4;

/// Random crops only: the synthetic scenes are small and the schedule short.
fn light_setup(epochs: usize, seed: u64) -> TrainSetup {
    let mut setup = TrainSetup {
        augment: AugmentationConfig {
            crop: Some(SYNTH_SIZE),
            geometric_p: 0.0,
            photometric_p: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    setup.train.base_lr = E2E_LR;
    setup.train.total_epochs = epochs;
    setup.train.seed = seed;
    setup
}

fn synthetic_end_to_end() -> Outcome {
    let t0 = Instant::now();
    let stamp = |what: &str| say(&format!("      [7] {what} at {:.0}s", t0.elapsed().as_secs_f64()));
    let all = synth_generate(SYNTH_SEED, SYNTH_TRAIN + SYNTH_HELD, SYNTH_SIZE, SYNTH_DENSITY).unwrap();
    let train_pairs: Vec<SamplePair> = all[..SYNTH_TRAIN].iter().map(|s| s.pair.clone()).collect();
    let held: Vec<SamplePair> = all[SYNTH_TRAIN..].iter().map(|s| s.pair.clone()).collect();
    let footprints: Vec<Sample> = all[..SYNTH_TRAIN].iter().map(|s| s.footprint_sample()).collect();
    let cfg = VariantConfig::small();

    let (spg, sp0) = build_spnet(&cfg, 1).unwrap();
    let pre = train(&spg, sp0, TrainData::Single(&footprints), &light_setup(PRETRAIN_EPOCHS, 1), |_| {}).unwrap();
    stamp("pretraining done");

    let scg = ModelGraph::new(Mode::Schanger, cfg).unwrap();
    let f1 = |ck: &Checkpoint, data: &[SamplePair]| {
        evaluate(&scg, ck, EvalData::Pairs(data), SYNTH_SIZE, 0.5).unwrap().metrics.f1
    };
    let (init, _) = inflate(&pre.model, &cfg, 0).unwrap();
    let ft = train(&scg, init, TrainData::Pairs(&train_pairs), &light_setup(FINETUNE_EPOCHS, 0), |_| {}).unwrap();
    let (train_f1, held_f1) = (f1(&ft.ema, &train_pairs), f1(&ft.ema, &held));
    stamp("fine-tuning done");

    let subset = few_shot_subset(&train_pairs, COMPARE_FRACTION, 0).unwrap();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..COMPARE_SEEDS {
        let setup = light_setup(COMPARE_EPOCHS, seed);
        let (scn_init, _) = inflate(&pre.model, &cfg, seed).unwrap();
        let scn = train(&scg, scn_init, TrainData::Pairs(&subset), &setup, |_| {}).unwrap();
        let rnd = train(&scg, scg.init(seed).unwrap(), TrainData::Pairs(&subset), &setup, |_| {}).unwrap();
        let (a, b) = (f1(&scn.model, &held), f1(&rnd.model, &held));
        wins += usize::from(a >= b);
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    stamp("comparison done");

    let ok = train_f1 >= TRAIN_F1_MIN && held_f1 >= HELD_F1_MIN && wins >= COMPARE_WINS_MIN;
    let detail = format!(
        "train F1 {train_f1:.4} (>= {TRAIN_F1_MIN}), held-out F1 {held_f1:.4} (>= {HELD_F1_MIN}); \
         SCN >= random in {wins}/{COMPARE_SEEDS} seeds (>= {COMPARE_WINS_MIN}) [{}]",
        pairs.join(" ")
    );
    (ok, detail)
}

/// Independent pixel loop: counts and the F1 of the change class.
fn brute_force(pred: &[bool], truth: &[bool]) -> ([u64; 4], f64) {
    let mut c = [0u64; 4];
    for (&p, &t) in pred.iter().zip(truth) {
        let slot = match (p, t) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[slot] += 1;
    }
    let p = if c[0] + c[1] == 0 { 0.0 } else { c[0] as f64 / (c[0] + c[1]) as f64 };
    let r = if c[0] + c[2] == 0 { 0.0 } else { c[0] as f64 / (c[0] + c[2]) as f64 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (c, f1)
}

fn metrics_oracle() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let mut rng = seeded(seed);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let density: f64 = rng.gen();
        let pred: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let truth: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
        let as_mask = |v: &[bool]| Tensor::from_vec(Shape::new(1, 1, h, w), v.iter().map(|&b| f32::from(u8::from(b))).collect()).unwrap();
        let mut counts = ConfusionCounts::default();
        counts.accumulate(&as_mask(&pred), &as_mask(&truth)).unwrap();
        let (want, f1) = brute_force(&pred, &truth);
        if [counts.tp, counts.fp, counts.fn_, counts.tn] != want || metrics(counts).f1 != f1 {
            mismatches += 1;
        }
    }
    let equal_pr = metrics(ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 });
    let fixed_point = equal_pr.precision == equal_pr.recall && equal_pr.f1 == equal_pr.precision;
    let spot = metrics(ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 0 });
    let spot_ok = spot.precision == 0.5 && spot.recall == 1.0 && (spot.f1 - 2.0 / 3.0).abs() < 1e-15;
    (
        mismatches == 0 && fixed_point && spot_ok,
        format!(
            "{mismatches} mismatches over 100 mask pairs; F1(P=R)==P {fixed_point}; P=0.5 R=1 gives F1 {:.15}",
            spot.f1
        ),
    )
}

const LN2_TOL: f64 = 1e-6;

fn loss_ema_schedule() -> Outcome {
    let s = Shape::new(2, 1, 8, 8);
    let y: Tensor<f32> = rand_tensor::<f32>(&mut keyed(3, "y"), s).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let bce = bce_dice_terms(&Tensor::<f32>::zeros(s), &y, 1.0).unwrap().bce;
    let bce_ok = (bce - std::f64::consts::LN_2).abs() <= LN2_TOL;

    let one = |v: f32| {
        let mut ck = Checkpoint::new(Metadata::default());
        ck.insert("w", ParamKind::ConvWeight, Tensor::full(Shape::new(1, 1, 1, 1), v));
        ck
    };
    let mut ema = EmaState::new(&one(0.0), 0.9998).unwrap();
    ema_update(&mut ema, &one(1.0)).unwrap();
    let shadow = ema.shadow.get("w").unwrap().value.data()[0] as f64;
    let ema_ok = (shadow - 0.0002).abs() <= 1e-9;

    let lr = lr_schedule(100, 100, 1000, 5e-4).unwrap();
    let lr_ok = lr == 5e-4;
    (
        bce_ok && ema_ok && lr_ok,
        format!("BCE at p=0.5 {bce:.9} (ln 2 +- {LN2_TOL:.0e}); EMA one step {shadow:.9}; lr at warmup end {lr:e}"),
    )
}

fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = seeded(seed);
    let mut ck = Checkpoint::new(Metadata {
        variant: if rng.gen_bool(0.5) { "small" } else { "base" }.into(),
        mode: if rng.gen_bool(0.5) { "spnet" } else { "schanger" }.into(),
        seed: rng.gen(),
    });
    let kinds = [ParamKind::ConvWeight, ParamKind::Bias, ParamKind::NormAffine, ParamKind::RunningStat];
    for i in 0..rng.gen_range(1..8) {
        let s = Shape::new(rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let value = Tensor::from_fn(s, |_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff));
        ck.insert(format!("m{i}.layer.weight"), kinds[rng.gen_range(0..4)], value);
    }
    ck
}

fn checkpoint_round_trip() -> Outcome {
    let (mut exact, mut caught, mut versioned) = (0, 0, 0);
    for seed in 0..50u64 {
        let ck = random_checkpoint(seed);
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let same = back.meta == ck.meta
            && back.tensors.len() == ck.tensors.len()
            && ck.tensors.iter().all(|(p, t)| {
                let b = back.get(p).unwrap();
                b.kind == t.kind
                    && b.value.shape() == t.value.shape()
                    && b.value.data().iter().zip(t.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        exact += usize::from(same);

        let payload: usize = ck.tensors.values().map(|p| 4 * p.value.shape().numel()).sum();
        let mut rng = seeded(seed ^ 0xC0FFEE);
        let at = bytes.len() - payload + rng.gen_range(0..payload);
        let mut bad = bytes.clone();
        bad[at] ^= 1 << rng.gen_range(0..8);
        caught += usize::from(matches!(decode_checkpoint(&bad), Err(Error::Checksum(_))));

        let text = String::from_utf8_lossy(&bytes[..bytes.len() - payload]).into_owned();
        let from = format!("\"format_version\":{FORMAT_VERSION}");
        let to = format!("\"format_version\":{}", FORMAT_VERSION + 1);
        let mut newer = text.replacen(&from, &to, 1).into_bytes();
        newer.extend_from_slice(&bytes[bytes.len() - payload..]);
        versioned += usize::from(matches!(decode_checkpoint(&newer), Err(Error::VersionMismatch { .. })));
    }
    (
        exact == 50 && caught == 50 && versioned == 50,
        format!("bit-exact {exact}/50, flipped payload byte detected {caught}/50, version change rejected {versioned}/50"),
    )
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let results = [
        criterion(1, "parameter reconciliation", s(1), parameter_reconciliation),
        criterion(2, "SCN delta reconciliation", s(1), delta_reconciliation),
        criterion(3, "FLOPs reconciliation", s(1), flops_reconciliation),
        criterion(4, "gradient verification", s(300), gradient_verification),
        criterion(5, "shared-attention invariance and receptive field", s(60), shared_attention),
        criterion(6, "weight-inflation correctness", s(10), weight_inflation),
        criterion(7, "synthetic end-to-end", s(45 * 60), synthetic_end_to_end),
        criterion(8, "metrics oracle", s(5), metrics_oracle),
        criterion(9, "loss/EMA/schedule unit suite", s(5), loss_ema_schedule),
        criterion(10, "checkpoint round trip and corruption detection", s(30), checkpoint_round_trip),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "{} acceptance criteria failed", results.len() - passed);
}
