use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, sigmoid};
use crate::tensor::{Real, Shape, Tensor};

pub const HEADS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Per-head weights, side heads first and the fused head last.
    pub lambda: Vec<f64>,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: vec![1.0; HEADS],
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.len() != HEADS {
            return Err(Error::Config(format!("lambda needs {HEADS} weights, got {}", self.lambda.len())));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambda weights must be finite and non-negative".into()));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

/// The two loss components, before they are summed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Pixel-mean binary cross-entropy.
    pub bce: f64,
    /// Batch mean of the per-sample soft Dice loss.
    pub dice: f64,
}

/// Per-sample Dice statistics `(intersection, denominator)`.
type DiceStats = Vec<(f64, f64)>;

fn check_target<T: Real>(s: Shape, target: &Tensor<T>) -> Result<()> {
    if target.shape() != s {
        return Err(Error::shape("bce_dice_loss", format!("target {} for logits {s}", target.shape())));
    }
    if target.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::InvalidArgument("bce_dice_loss: target must be binary".into()));
    }
    Ok(())
}

fn terms<T: Real>(z: &[T], p: &[T], y: &[T], n: usize, smooth: f64) -> (LossTerms, DiceStats) {
    let per = z.len() / n.max(1);
    // numerically stable BCE: max(z, 0) - z y + ln(1 + e^{-|z|})
    let mut bce = 0.0;
    for (&z, &y) in z.iter().zip(y) {
        let z = z.as_f64();
        bce += z.max(0.0) - z * y.as_f64() + (-z.abs()).exp().ln_1p();
    }
    bce /= z.len() as f64;
    let stats: DiceStats = (0..n)
        .map(|k| {
            let (ps, ys) = (&p[k * per..][..per], &y[k * per..][..per]);
            let inter: f64 = ps.iter().zip(ys).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let denom: f64 = ps.iter().chain(ys).map(|v| v.as_f64()).sum::<f64>() + smooth;
            (inter, denom)
        })
        .collect();
    let dice = stats.iter().map(|&(i, d)| 1.0 - (2.0 * i + smooth) / d).sum::<f64>() / n as f64;
    (LossTerms { bce, dice }, stats)
}

/// Value-only evaluation of the BCE and Dice components on raw logits.
pub fn bce_dice_terms<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<LossTerms> {
    let s = logits.shape();
    check_target(s, target)?;
    let p: Vec<T> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    Ok(terms(logits.data(), &p, target.data(), s.n, smooth).0)
}

/// Pixel-mean binary cross-entropy plus soft Dice loss on sigmoid
/// probabilities. Dice is computed per sample and averaged over the batch.
pub fn bce_dice_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
    let s = tape.shape(logits);
    check_target(s, target)?;
    let zv = tape.rc(logits);
    let p: Vec<T> = zv.data().iter().map(|&z| sigmoid(z)).collect();
    let per = s.numel() / s.n.max(1);
    let total = s.numel() as f64;
    let (LossTerms { bce, dice }, stats) = terms(zv.data(), &p, target.data(), s.n, smooth);

    let y = target.clone();
    let value = Tensor::scalar(T::from_f64(bce + dice));
    tape.record("bce_dice", value, &[logits], move |g, sink| {
        let g = g.data()[0].as_f64();
        let Some(gz) = sink.buf(logits) else { return };
        for n in 0..s.n {
            let (inter, denom) = stats[n];
            let num = 2.0 * inter + smooth;
            for i in n * per..(n + 1) * per {
                let (pi, yi) = (p[i].as_f64(), y.data()[i].as_f64());
                let d_bce = (pi - yi) / total;
                // d/dp of 1 - num/denom, then through the sigmoid
                let d_dice = -(2.0 * yi * denom - num) / (denom * denom) / s.n as f64;
                gz[i] += T::from_f64(g * (d_bce + d_dice * pi * (1.0 - pi)));
            }
        }
    })
}

/// Weighted sum of [`bce_dice_loss`] over the six heads.
pub fn deep_supervision_loss<T: Real>(tape: &mut Tape<T>, heads: &[Var], target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if heads.len() != HEADS {
        return Err(Error::InvalidArgument(format!("expected {HEADS} heads, got {}", heads.len())));
    }
    let mut total: Option<Var> = None;
    for (&h, &lambda) in heads.iter().zip(&cfg.lambda) {
        let l = bce_dice_loss(tape, h, target, cfg.dice_smooth)?;
        let l = ops::scale(tape, l, lambda)?;
        total = Some(match total {
            Some(t) => ops::add(tape, t, l)?,
            None => l,
        });
    }
    Ok(total.expect("six heads"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(z: &[f64], y: &[f64], n: usize) -> f64 {
        let s = Shape::new(n, 1, 1, z.len() / n);
        let mut tape = Tape::<f64>::new();
        let zl = tape.leaf(Tensor::from_vec(s, z.to_vec()).unwrap(), false);
        let l = bce_dice_loss(&mut tape, zl, &Tensor::from_vec(s, y.to_vec()).unwrap(), 1.0).unwrap();
        tape.value(l).data()[0]
    }

    /// Direct evaluation of the loss definition.
    fn oracle(z: &[f64], y: &[f64], n: usize, smooth: f64) -> f64 {
        let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let bce = p.iter().zip(y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / z.len() as f64;
        let per = z.len() / n;
        let dice = (0..n)
            .map(|k| {
                let (ps, ys) = (&p[k * per..(k + 1) * per], &y[k * per..(k + 1) * per]);
                let i: f64 = ps.iter().zip(ys).map(|(a, b)| a * b).sum();
                1.0 - (2.0 * i + smooth) / (ps.iter().sum::<f64>() + ys.iter().sum::<f64>() + smooth)
            })
            .sum::<f64>()
            / n as f64;
        bce + dice
    }

    #[test]
    fn bce_at_half_is_ln2() {
        // all-zero target: Dice term is 1 - 1 / (0.5 * 4 + 1) = 2/3
        let l = eval(&[0.0; 4], &[0.0; 4], 1);
        assert!((l - (std::f64::consts::LN_2 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_component_at_half() {
        let s = Shape::new(2, 1, 2, 2);
        let y = Tensor::from_vec(s, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let t = bce_dice_terms(&Tensor::<f64>::zeros(s), &y, 1.0).unwrap();
        assert!((t.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.bce + t.dice - eval(&[0.0; 8], y.data(), 2)).abs() < 1e-12);
    }

    #[test]
    fn saturated_prediction_is_near_zero() {
        let y = [1.0, 0.0, 1.0, 0.0];
        let z: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 20.0 } else { -20.0 }).collect();
        assert!(eval(&z, &y, 1) < 1e-4);
    }

    #[test]
    fn matches_definition() {
        let z = [0.3, -1.2, 2.0, 0.0, -0.4, 0.9];
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        for n in [1, 2, 3] {
            assert!((eval(&z, &y, n) - oracle(&z, &y, n, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_soft_targets() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(1, 1, 1, 2);
        let z = tape.leaf(Tensor::zeros(s), false);
        assert!(bce_dice_loss(&mut tape, z, &Tensor::full(s, 0.5), 1.0).is_err());
    }

    #[test]
    fn deep_supervision_selectors() {
        let s = Shape::new(1, 1, 2, 2);
        let y = Tensor::from_vec(s, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let run = |lambda: Vec<f64>, same: bool| {
            let mut tape = Tape::<f64>::new();
            let heads: Vec<Var> = (0..6)
                .map(|k| {
                    let v = if same { 0.4 } else { 0.1 * k as f64 - 0.2 };
                    tape.leaf(Tensor::full(s, v), false)
                })
                .collect();
            let l = deep_supervision_loss(&mut tape, &heads, &y, &LossConfig { lambda, dice_smooth: 1.0 }).unwrap();
            let single = bce_dice_loss(&mut tape, heads[0], &y, 1.0).unwrap();
            (tape.value(l).data()[0], tape.value(single).data()[0])
        };
        assert_eq!(run(vec![0.0; 6], false).0, 0.0);
        let (l, single) = run(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], false);
        assert_eq!(l, single);
        let (l, single) = run(vec![1.0; 6], true);
        assert!((l - 6.0 * single).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let heads: Vec<Var> = (0..5).map(|_| tape.leaf(Tensor::zeros(s), false)).collect();
        assert!(deep_supervision_loss(&mut tape, &heads, &y, &LossConfig::default()).is_err());
    }
}
