//! Deep-supervised optimisation with EMA weights.

mod augment;
mod ema;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use augment::{augment, augment_single, hflip, vflip, AugmentationConfig, Photometric};
pub use ema::{ema_update, warmup_momentum, EmaState, DEFAULT_EMA_MOMENTUM};
pub use loss::{bce_dice_loss, bce_dice_terms, deep_supervision_loss, LossConfig, LossTerms, HEADS};
pub use optim::AdamW;
pub use schedule::lr_schedule;
pub use trainer::{batch_loss, history_csv, train, EpochRecord, TrainConfig, TrainData, TrainOutput, TrainSetup};
