//! Bitemporal change detection: tensor kernels with reverse-mode autodiff,
//! the SPNet/SChanger networks, single-temporal pretraining with weight
//! inflation, training, evaluation and reporting.

mod alloc;
pub mod analysis;
pub mod autograd;
pub mod blocks;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod networks;
pub mod ops;
pub mod random;
pub mod scn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
