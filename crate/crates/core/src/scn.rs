//! Inflation of a pretrained SPNet checkpoint into an SChanger
//! initialisation.
//!
//! SChanger's parameter paths are SPNet's plus ten TFMs: one inside each
//! two-stream attention block and one fusing the streams after each decoder
//! stage. Inflation copies every SPNet tensor unchanged and initialises only
//! the TFM tensors.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::data_io::{Checkpoint, Metadata};
use crate::error::{Error, Result};
use crate::networks::{Mode, ModelGraph, VariantConfig};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Copied,
    New,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub path: String,
    pub shape: Shape,
    pub count: usize,
    pub trainable: bool,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InflationReport {
    pub copied_paths: Vec<String>,
    pub new_paths: Vec<String>,
    /// Trainable scalars copied from SPNet.
    pub copied_param_count: usize,
    /// Trainable scalars freshly initialised.
    pub new_param_count: usize,
    pub delta_fraction: f64,
    pub rows: Vec<ReportRow>,
}

impl InflationReport {
    /// Human-readable table: path, shape, scalar count, origin.
    pub fn table(&self) -> String {
        let mut s = format!("{:<40} {:<18} {:>9}  origin\n", "path", "shape", "count");
        for r in &self.rows {
            let origin = match r.origin {
                Origin::Copied => "copied",
                Origin::New => "new",
            };
            let _ = writeln!(s, "{:<40} {:<18} {:>9}  {origin}", r.path, r.shape.to_string(), r.count);
        }
        let _ = writeln!(
            s,
            "copied {} params, new {} params, delta {:.1}%",
            self.copied_param_count,
            self.new_param_count,
            100.0 * self.delta_fraction
        );
        s
    }
}

pub fn inflate(spnet: &Checkpoint, cfg: &VariantConfig, seed: u64) -> Result<(Checkpoint, InflationReport)> {
    let want = cfg.name.name();
    if spnet.meta.variant != want {
        return Err(Error::VariantMismatch {
            expected: want.into(),
            found: spnet.meta.variant.clone(),
        });
    }
    if spnet.meta.mode != Mode::Spnet.name() {
        return Err(Error::InvalidArgument(format!(
            "inflation needs an spnet checkpoint, got mode `{}`",
            spnet.meta.mode
        )));
    }
    let sp_graph = ModelGraph::new(Mode::Spnet, *cfg)?;
    let sp_paths = sp_graph.tensor_paths()?;
    spnet.require(sp_paths.iter().map(String::as_str))?;

    let sc_graph = ModelGraph::new(Mode::Schanger, *cfg)?;
    let fresh = sc_graph.init(seed)?;
    let mut out = Checkpoint::new(Metadata {
        variant: want.into(),
        mode: Mode::Schanger.name().into(),
        seed,
    });
    let mut rows = Vec::new();
    let (mut copied_paths, mut new_paths) = (Vec::new(), Vec::new());
    let (mut copied_n, mut new_n) = (0, 0);
    for (path, p) in fresh.tensors {
        let (param, origin) = if sp_paths.contains(&path) {
            let src = spnet.get(&path)?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "inflate",
                    format!("{path} is {} in the source, expected {}", src.value.shape(), p.value.shape()),
                ));
            }
            (src.clone(), Origin::Copied)
        } else {
            (p, Origin::New)
        };
        let trainable = param.kind.trainable();
        let count = param.value.numel();
        match origin {
            Origin::Copied => {
                copied_paths.push(path.clone());
                if trainable {
                    copied_n += count;
                }
            }
            Origin::New => {
                new_paths.push(path.clone());
                if trainable {
                    new_n += count;
                }
            }
        }
        rows.push(ReportRow {
            path: path.clone(),
            shape: param.value.shape(),
            count,
            trainable,
            origin,
        });
        out.tensors.insert(path, param);
    }
    let report = InflationReport {
        copied_paths,
        new_paths,
        copied_param_count: copied_n,
        new_param_count: new_n,
        delta_fraction: new_n as f64 / (new_n + copied_n) as f64,
        rows,
    };
    Ok((out, report))
}

/// Paths updated during fine-tuning: every optimised parameter. Nothing is
/// frozen; batch-norm running statistics are excluded only because they are
/// never optimised.
pub fn finetune_mode(ckpt: &Checkpoint) -> BTreeSet<String> {
    ckpt.trainable_paths().into_iter().collect()
}
