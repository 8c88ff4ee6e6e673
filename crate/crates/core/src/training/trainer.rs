use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, augment_single, AugmentationConfig};
use super::ema::{ema_update, warmup_momentum, EmaState, DEFAULT_EMA_MOMENTUM};
use super::loss::{deep_supervision_loss, LossConfig};
use super::optim::AdamW;
use super::schedule::lr_schedule;
use crate::autograd::Tape;
use crate::blocks::Ctx;
use crate::data_io::{normalize_image, Checkpoint, Sample, SamplePair};
use crate::error::{Error, Result};
use crate::networks::{schanger_forward, spnet_forward, Mode, ModelGraph};
use crate::random::keyed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ema_momentum: f64,
    /// Ramp the EMA momentum up from 0.1 over the first updates.
    pub ema_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            weight_decay: 2e-4,
            warmup_epochs: 1,
            total_epochs: 30,
            batch_size: 8,
            seed: 0,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            ema_warmup: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr and weight_decay must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1)", self.ema_momentum)));
        }
        Ok(())
    }
}

/// Everything that shapes one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Bitemporal pairs for SChanger.
    Pairs(&'a [SamplePair]),
    /// Single-temporal samples for SPNet pretraining.
    Single(&'a [Sample]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Single(s) => s.len(),
        }
    }

    fn mode(&self) -> Mode {
        match self {
            TrainData::Pairs(_) => Mode::Schanger,
            TrainData::Single(_) => Mode::Spnet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Checkpoint,
    pub ema: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for r in history {
        s.push_str(&format!("{},{:.8},{:.8e}\n", r.epoch, r.mean_loss, r.lr));
    }
    s
}

/// A normalised, augmented mini-batch.
struct Batch {
    t1: Tensor<f32>,
    t2: Option<Tensor<f32>>,
    mask: Tensor<f32>,
}

fn make_batch(data: TrainData<'_>, idx: &[usize], aug: &AugmentationConfig, seed: u64, epoch: usize) -> Result<Batch> {
    let mut t1 = Vec::with_capacity(idx.len());
    let mut t2 = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = keyed(seed, &format!("augment/{epoch}/{i}"));
        match data {
            TrainData::Pairs(p) => {
                let a = augment(&p[i], aug, &mut rng)?;
                t1.push(normalize_image(&a.t1));
                t2.push(normalize_image(&a.t2));
                masks.push(a.mask);
            }
            TrainData::Single(s) => {
                let a = augment_single(&s[i], aug, &mut rng)?;
                t1.push(normalize_image(&a.image));
                masks.push(a.mask);
            }
        }
    }
    let stack = |v: &[Tensor<f32>]| Tensor::stack_batch(&v.iter().collect::<Vec<_>>());
    Ok(Batch {
        t1: stack(&t1)?,
        t2: if t2.is_empty() { None } else { Some(stack(&t2)?) },
        mask: stack(&masks)?,
    })
}

/// One forward/backward pass. Returns the loss and the gradient of every
/// trainable tensor that took part. Running statistics in `ckpt` advance.
fn loss_and_grads(
    g: &ModelGraph,
    ckpt: &mut Checkpoint,
    batch: &Batch,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&mut tape, ckpt, true, seed);
    let x1 = ctx.input(&batch.t1);
    let outs = match &batch.t2 {
        Some(t2) => {
            let x2 = ctx.input(t2);
            schanger_forward(&mut ctx, g, x1, x2)?
        }
        None => spnet_forward(&mut ctx, g, x1)?,
    };
    let leaves = ctx.leaves().clone();
    drop(ctx);
    let loss = deep_supervision_loss(&mut tape, &outs, &batch.mask, loss_cfg)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (path, var) in leaves {
        if let Some(gr) = grads.take(var) {
            out.insert(path, gr);
        }
    }
    Ok((value, out))
}

/// Trains `ckpt` on `data`, returning raw and EMA weights plus the per-epoch
/// loss history. `on_epoch` is called after every epoch.
pub fn train(
    g: &ModelGraph,
    mut ckpt: Checkpoint,
    data: TrainData<'_>,
    setup: &TrainSetup,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    setup.augment.validate()?;
    if data.len() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.mode() != g.mode {
        return Err(Error::Config(format!(
            "{} data cannot train a {} graph",
            data.mode().name(),
            g.mode.name()
        )));
    }
    g.check(&ckpt)?;

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.total_epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut ema = EmaState::new(&ckpt, cfg.ema_momentum)?;
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut step = 0;

    for epoch in 1..=cfg.total_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut keyed(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = make_batch(data, idx, &setup.augment, cfg.seed, epoch)?;
            let (loss, grads) = match loss_and_grads(g, &mut ckpt, &batch, &setup.loss, cfg.seed ^ step as u64) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, epoch }),
                r => r?,
            };
            if !loss.is_finite() || grads.values().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { step, epoch });
            }
            lr = lr_schedule(step, warmup_steps, total_steps, cfg.base_lr)?;
            opt.step(&mut ckpt, &grads, lr)?;
            ema.momentum = if cfg.ema_warmup {
                warmup_momentum(cfg.ema_momentum, opt.steps() - 1)
            } else {
                cfg.ema_momentum
            };
            ema_update(&mut ema, &ckpt)?;
            loss_sum += loss * idx.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutput {
        model: ckpt,
        ema: ema.shadow,
        history,
    })
}

/// Mean deep-supervision loss of `ckpt` on one un-augmented batch, in
/// training mode but without applying any update.
pub fn batch_loss(g: &ModelGraph, ckpt: &Checkpoint, data: TrainData<'_>, loss_cfg: &LossConfig) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = make_batch(data, &idx, &AugmentationConfig::identity(), 0, 0)?;
    let mut scratch = ckpt.clone();
    Ok(loss_and_grads(g, &mut scratch, &batch, loss_cfg, 0)?.0)
}
