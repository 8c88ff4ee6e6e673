use proptest::prelude::*;
use schanger_core::data_io::{normalize_image, synth_generate, SamplePair};
use schanger_core::evaluation::{binarize, evaluate, metrics, predict_probs, ConfusionCounts, EvalData};
use schanger_core::networks::{build_schanger, infer, VariantConfig};
use schanger_core::ops::sigmoid;
use schanger_core::{Shape, Tensor};

fn pairs(n: usize, size: usize) -> Vec<SamplePair> {
    synth_generate(12, n, size, 0.1).unwrap().into_iter().map(|s| s.pair).collect()
}

#[test]
fn single_tile_matches_direct_inference() {
    let (g, ckpt) = build_schanger(&VariantConfig::small(), 1).unwrap();
    let data = pairs(3, 32);
    let report = evaluate(&g, &ckpt, EvalData::Pairs(&data), 32, 0.5).unwrap();
    let mut direct = ConfusionCounts::default();
    for p in &data {
        let outs = infer(&g, &ckpt, &normalize_image(&p.t1), Some(&normalize_image(&p.t2))).unwrap();
        let pred = outs[5].map(|z| if sigmoid(z) >= 0.5 { 1.0 } else { 0.0 });
        direct.accumulate(&pred, &p.mask).unwrap();
    }
    assert_eq!(report.metrics.counts, direct);
    assert_eq!(report.evaluated, 3);
}

#[test]
fn perfect_labels_score_one_and_counts_are_conserved() {
    let (g, ckpt) = build_schanger(&VariantConfig::small(), 2).unwrap();
    // 48 is not a multiple of the 32 tile, so padding is exercised
    let mut data = pairs(2, 48);
    for p in &mut data {
        let prob = predict_probs(&g, &ckpt, &p.t1, Some(&p.t2), 32).unwrap();
        p.mask = binarize(&prob, 0.5).unwrap();
    }
    let r = evaluate(&g, &ckpt, EvalData::Pairs(&data), 32, 0.5).unwrap();
    assert_eq!(r.metrics.counts.total(), 2 * 48 * 48);
    assert_eq!((r.metrics.counts.fp, r.metrics.counts.fn_), (0, 0));
    if r.metrics.counts.tp > 0 {
        assert_eq!(r.metrics.f1, 1.0);
    } else {
        assert!(r.metrics.degenerate);
    }
}

#[test]
fn unreadable_samples_are_skipped_and_reported() {
    let (g, ckpt) = build_schanger(&VariantConfig::small(), 3).unwrap();
    let mut data = pairs(2, 32);
    data[1].t2 = Tensor::zeros(Shape::new(1, 3, 16, 16));
    let r = evaluate(&g, &ckpt, EvalData::Pairs(&data), 32, 0.5).unwrap();
    assert_eq!(r.evaluated, 1);
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].0, data[1].id);
    assert_eq!(r.metrics.counts.total(), 32 * 32);
}

fn binary(v: Vec<bool>, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(Shape::new(1, 1, h, w), v.into_iter().map(|b| b as u8 as f32).collect()).unwrap()
}

fn quadrant(t: &Tensor<f32>, qy: usize, qx: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| t.at(0, 0, qy * h + y, qx * w + x))
}

proptest! {
    #[test]
    fn tiles_accumulate_like_the_whole(
        h in 1usize..5, w in 1usize..5,
        seed in proptest::collection::vec(any::<(bool, bool)>(), 64),
    ) {
        let (h, w) = (2 * h, 2 * w);
        let (p, t): (Vec<bool>, Vec<bool>) = seed.into_iter().take(h * w).unzip();
        let (pred, truth) = (binary(p, h, w), binary(t, h, w));
        let mut whole = ConfusionCounts::default();
        whole.accumulate(&pred, &truth).unwrap();
        let mut tiled = ConfusionCounts::default();
        for (qy, qx) in [(1, 1), (0, 1), (1, 0), (0, 0)] {
            tiled.accumulate(&quadrant(&pred, qy, qx), &quadrant(&truth, qy, qx)).unwrap();
        }
        prop_assert_eq!(whole, tiled);
        prop_assert_eq!(whole.total(), (h * w) as u64);
    }

    #[test]
    fn metrics_are_scale_invariant(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000, k in 1u64..1000) {
        let a = metrics(ConfusionCounts { tp, fp, fn_, tn });
        let b = metrics(ConfusionCounts { tp: k * tp, fp: k * fp, fn_: k * fn_, tn: k * tn });
        prop_assert!((a.precision - b.precision).abs() < 1e-12);
        prop_assert!((a.recall - b.recall).abs() < 1e-12);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert_eq!(a.degenerate, b.degenerate);
        for v in [a.precision, a.recall, a.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
