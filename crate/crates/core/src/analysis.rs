//! Parameter and FLOPs accounting over a [`ModelGraph`].

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::Result;
use crate::networks::{is_tfm_path, ModelGraph, Mode, Variant, VariantConfig};
use crate::tensor::Shape;

/// Published reference figures for one variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub params_m: f64,
    pub flops_g: f64,
    pub delta_params_m: f64,
    pub delta_fraction: f64,
}

pub fn reference(v: Variant) -> Reference {
    match v {
        Variant::Small => Reference {
            params_m: 0.607,
            flops_g: 6.242,
            delta_params_m: 0.026,
            delta_fraction: 0.042,
        },
        Variant::Base => Reference {
            params_m: 2.370,
            flops_g: 18.275,
            delta_params_m: 0.105,
            delta_fraction: 0.044,
        },
    }
}

pub const PARAM_TOLERANCE: f64 = 0.05;
pub const FLOPS_TOLERANCE: f64 = 0.15;
pub const DELTA_FRACTION_RANGE: (f64, f64) = (0.037, 0.055);
/// Costing input: one bitemporal pair of 3x256x256 images.
pub const COSTING_INPUT: Shape = Shape {
    n: 2,
    c: 3,
    h: 256,
    w: 256,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsConvention {
    /// flops = 2 x MACs.
    TwiceMacs,
    /// flops = MACs.
    Macs,
}

impl FlopsConvention {
    pub const ALL: [FlopsConvention; 2] = [FlopsConvention::TwiceMacs, FlopsConvention::Macs];

    pub fn multiplier(self) -> u64 {
        match self {
            FlopsConvention::TwiceMacs => 2,
            FlopsConvention::Macs => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlopsConvention::TwiceMacs => "2*MACs",
            FlopsConvention::Macs => "MACs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub path: String,
    pub kind: &'static str,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostLedger {
    pub rows: Vec<CostRow>,
    pub totals: Totals,
    pub flops_multiplier: u64,
}

impl CostLedger {
    fn from_rows(rows: Vec<CostRow>, flops_multiplier: u64) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let macs = rows.iter().map(|r| r.macs).sum();
        CostLedger {
            rows,
            totals: Totals {
                params,
                macs,
                flops: macs * flops_multiplier,
            },
            flops_multiplier,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,kind,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.path, r.kind, r.params, r.macs);
        }
        s
    }
}

/// One row per parameterised layer. Conv: `out*(in/groups)*k*k` plus bias;
/// norm: `2*channels`. Running statistics are not counted.
pub fn count_params(g: &ModelGraph) -> CostLedger {
    let mut rows: BTreeMap<&str, CostRow> = BTreeMap::new();
    for l in &g.layers {
        let params = l.params();
        if params > 0 {
            rows.entry(l.path.as_str()).or_insert(CostRow {
                path: l.path.clone(),
                kind: l.kind_name(),
                params,
                macs: 0,
            });
        }
    }
    CostLedger::from_rows(rows.into_values().collect(), FlopsConvention::TwiceMacs.multiplier())
}

/// MACs for `input`. For SChanger the batch holds the temporal images, so
/// weight-shared layers are costed once per stream.
pub fn count_flops(g: &ModelGraph, input: Shape, convention: FlopsConvention) -> Result<CostLedger> {
    let t = g.trace(input)?;
    let mut seen = std::collections::HashSet::new();
    let rows = t
        .layers
        .iter()
        .map(|l| CostRow {
            path: l.path.clone(),
            kind: l.kind_name(),
            params: if seen.insert(l.path.as_str()) { l.params() } else { 0 },
            macs: l.macs,
        })
        .collect();
    Ok(CostLedger::from_rows(rows, convention.multiplier()))
}

/// Trainable scalars SChanger adds over SPNet, i.e. the TFM parameters.
pub fn delta_params(schanger: &ModelGraph) -> usize {
    count_params(schanger)
        .rows
        .iter()
        .filter(|r| is_tfm_path(&r.path))
        .map(|r| r.params)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub low: f64,
    pub high: f64,
}

impl Check {
    fn relative(name: String, value: f64, target: f64, tol: f64) -> Self {
        Check {
            name,
            value,
            target,
            low: target * (1.0 - tol),
            high: target * (1.0 + tol),
        }
    }

    pub fn pass(&self) -> bool {
        self.value >= self.low && self.value <= self.high
    }
}

/// Accounting summary of one variant.
#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: VariantConfig,
    pub spnet_params: usize,
    pub schanger_params: usize,
    pub delta_params: usize,
    /// MACs of SChanger on [`COSTING_INPUT`].
    pub macs: u64,
}

impl VariantReport {
    pub fn new(v: &VariantConfig) -> Result<Self> {
        let sp = ModelGraph::new(Mode::Spnet, *v)?;
        let sc = ModelGraph::new(Mode::Schanger, *v)?;
        Ok(VariantReport {
            variant: *v,
            spnet_params: count_params(&sp).totals.params,
            schanger_params: count_params(&sc).totals.params,
            delta_params: delta_params(&sc),
            macs: count_flops(&sc, COSTING_INPUT, FlopsConvention::Macs)?.totals.macs,
        })
    }

    pub fn delta_fraction(&self) -> f64 {
        self.delta_params as f64 / self.schanger_params as f64
    }

    pub fn flops(&self, c: FlopsConvention) -> u64 {
        self.macs * c.multiplier()
    }

    /// Parameter, delta and FLOPs checks against the published figures. FLOPs
    /// get one check per convention; reconciliation needs only one of them.
    pub fn checks(&self) -> Vec<Check> {
        let r = reference(self.variant.name);
        let v = self.variant.name;
        let mut out = vec![
            Check::relative(format!("{v} params (M)"), self.schanger_params as f64 / 1e6, r.params_m, PARAM_TOLERANCE),
            Check {
                name: format!("{v} delta fraction"),
                value: self.delta_fraction(),
                target: r.delta_fraction,
                low: DELTA_FRACTION_RANGE.0,
                high: DELTA_FRACTION_RANGE.1,
            },
        ];
        for c in FlopsConvention::ALL {
            out.push(Check::relative(
                format!("{v} flops (G) [{}]", c.name()),
                self.flops(c) as f64 / 1e9,
                r.flops_g,
                FLOPS_TOLERANCE,
            ));
        }
        out
    }

    pub fn reconciled(&self) -> bool {
        let checks = self.checks();
        let flops_ok = checks[2..].iter().any(Check::pass);
        checks[0].pass() && checks[1].pass() && flops_ok
    }
}

/// Efficiency table: one row per stage with its downsample ratio and width
/// for each variant, then FLOPs, parameters and the SChanger-over-SPNet
/// parameter delta.
pub fn emit_table(reports: &[VariantReport], convention: FlopsConvention) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<18}{:>7}", "Stage", "Ratio");
    for r in reports {
        let _ = write!(s, "{:>18}", format!("SChanger-{}", r.variant.name));
    }
    s.push('\n');
    let names = ["stem", "stage 1", "stage 2", "stage 3", "stage 4", "stage 5"];
    for (i, name) in names.iter().enumerate() {
        let ratio = reports.first().map_or(0, |r| r.variant.downsample_ratios[i]);
        let _ = write!(s, "{name:<18}{ratio:>7}");
        for r in reports {
            let _ = write!(s, "{:>18}", r.variant.channels[i]);
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<25}", format!("Flops (G) [{}]", convention.name()));
    for r in reports {
        let _ = write!(s, "{:>18.3}", r.flops(convention) as f64 / 1e9);
    }
    s.push('\n');
    let _ = write!(s, "{:<25}", "Parameters (M)");
    for r in reports {
        let _ = write!(s, "{:>18.3}", r.schanger_params as f64 / 1e6);
    }
    s.push('\n');
    let _ = write!(s, "{:<25}", "dParameters (M)");
    for r in reports {
        let cell = format!("{:.3} ({:.1}%)", r.delta_params as f64 / 1e6, 100.0 * r.delta_fraction());
        let _ = write!(s, "{cell:>18}");
    }
    s.push('\n');
    s
}
