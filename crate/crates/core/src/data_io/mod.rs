//! Datasets, synthetic data, checkpoints and prediction rasters.

mod checkpoint;
mod raster;
mod sample;
mod synth;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Metadata, Param, ParamKind,
    FORMAT_VERSION, MAGIC,
};
pub use raster::{
    load_cd_dataset, load_single_dataset, read_label, read_rgb, write_cd_dataset, write_prediction, write_rgb,
    write_single_dataset, Prediction, FN_COLOR, FP_COLOR, LABEL_THRESHOLD, TN_COLOR, TP_COLOR,
};
pub use sample::{few_shot_subset, normalize_image, Sample, SamplePair, FEW_SHOT_FRACTIONS, NORM_MEAN, NORM_STD};
pub use synth::{footprint, synth_generate, Building, Jitter, Rect, SynthSample, MAX_CHANGE_DENSITY};
