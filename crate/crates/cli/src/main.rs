//! `schanger` command-line entry point.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use schanger_core::analysis::{emit_table, FlopsConvention, VariantReport};
use schanger_core::data_io::{
    few_shot_subset, load_cd_dataset, load_checkpoint, load_single_dataset, save_checkpoint, synth_generate,
    write_cd_dataset, write_prediction, write_single_dataset, Checkpoint, Prediction, Sample, SamplePair,
};
use schanger_core::evaluation::{binarize, evaluate, predict_probs, EvalData};
use schanger_core::networks::{Mode, ModelGraph, Variant, VariantConfig};
use schanger_core::scn::inflate;
use schanger_core::training::{history_csv, train, TrainData, TrainOutput};
use schanger_core::Error;

use config::{FileConfig, Resolved};

#[derive(Parser)]
#[command(name = "schanger", version, about = "Bitemporal change detection: pretrain, inflate, fine-tune and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Output directory.
    #[arg(long, env = "SCHANGER_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Small,
    Base,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Small => Variant::Small,
            VariantArg::Base => Variant::Base,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    TwiceMacs,
    Macs,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain SPNet on a single-temporal dataset or synthetic footprints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset root holding `<split>/{image,label}`.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "pretrain")]
        split: String,
        /// Generate this many synthetic footprint samples instead of reading a dataset.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Inflate a pretrained SPNet checkpoint into an SChanger initialisation.
    Inflate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune SChanger from an inflated checkpoint or from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset root holding `<split>/{A,B,label}`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// Starting checkpoint; random initialisation when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Few-shot fraction of the training list.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Print precision, recall and F1 of a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Write mask and outcome-composite rasters for a dataset split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Parameter and FLOPs accounting; exits 5 when outside tolerance.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "twice-macs")]
        convention: ConventionArg,
    },
    /// Materialise a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::VariantMismatch { .. } => 2,
            Error::Diverged { .. } | Error::NonFinite { .. } => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(command: &str, common: &Common, flags: Option<&TrainFlags>) -> Result<Resolved, Failure> {
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut r = Resolved::new(command, file, common.seed, common.variant.map(Into::into), common.out.clone());
    if let Some(f) = flags {
        let t = &mut r.setup.train;
        t.total_epochs = f.epochs.unwrap_or(t.total_epochs);
        t.warmup_epochs = f.warmup_epochs.unwrap_or(t.warmup_epochs);
        t.batch_size = f.batch_size.unwrap_or(t.batch_size);
        t.base_lr = f.lr.unwrap_or(t.base_lr);
    }
    r.validate()?;
    Ok(r)
}

fn start(r: &Resolved) -> Outcome {
    fs::create_dir_all(&r.out).map_err(Error::from)?;
    let text = r.to_toml()?;
    fs::write(r.out.join("config.toml"), &text).map_err(Error::from)?;
    eprintln!("# resolved config\n{text}");
    Ok(())
}

fn data_root(flag: Option<PathBuf>, r: &Resolved) -> Result<PathBuf, Failure> {
    let root = flag
        .or_else(|| r.data.clone())
        .ok_or_else(|| Error::Config("no dataset given (use --data or `data` in the config file)".into()))?;
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset path {} does not exist", root.display())).into());
    }
    Ok(root)
}

/// Loads a checkpoint and checks it against `--variant` when given.
fn open_checkpoint(path: &Path, r: &Resolved) -> Result<(ModelGraph, Checkpoint), Failure> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())).into());
    }
    let ckpt = load_checkpoint(path)?;
    let variant: Variant = ckpt.meta.variant.parse()?;
    if let Some(want) = r.variant_flag {
        if want != variant {
            return Err(Error::VariantMismatch {
                expected: want.name().into(),
                found: variant.name().into(),
            }
            .into());
        }
    }
    let mode = match ckpt.meta.mode.as_str() {
        "spnet" => Mode::Spnet,
        "schanger" => Mode::Schanger,
        other => return Err(Error::Checkpoint(format!("unknown mode `{other}`")).into()),
    };
    let g = ModelGraph::new(mode, VariantConfig::of(variant))?;
    g.check(&ckpt)?;
    Ok((g, ckpt))
}

fn write_run(out: &Path, prefix: &str, result: &TrainOutput) -> Outcome {
    save_checkpoint(&result.ema, &out.join(format!("{prefix}.ckpt")))?;
    save_checkpoint(&result.model, &out.join(format!("{prefix}_raw.ckpt")))?;
    fs::write(out.join(format!("{prefix}_loss.csv")), history_csv(&result.history)).map_err(Error::from)?;
    eprintln!("wrote {}", out.join(format!("{prefix}.ckpt")).display());
    Ok(())
}

fn progress(r: &schanger_core::training::EpochRecord) {
    eprintln!("epoch {:>4}  loss {:.5}  lr {:.3e}", r.epoch, r.mean_loss, r.lr);
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Pretrain {
            common,
            flags,
            data,
            split,
            synthetic,
        } => {
            let r = resolve("pretrain", &common, Some(&flags))?;
            let samples: Vec<Sample> = match synthetic {
                Some(n) => synth_generate(r.seed, n, r.synth.size, r.synth.density)?
                    .iter()
                    .map(|s| s.footprint_sample())
                    .collect(),
                None => load_single_dataset(&data_root(data, &r)?, &split)?,
            };
            start(&r)?;
            let g = ModelGraph::new(Mode::Spnet, VariantConfig::of(r.variant))?;
            let init = g.init(r.seed)?;
            let result = train(&g, init, TrainData::Single(&samples), &r.setup, progress)?;
            write_run(&r.out, "spnet", &result)
        }
        Command::Inflate { common, checkpoint } => {
            let r = resolve("inflate", &common, None)?;
            let (_, ckpt) = open_checkpoint(&checkpoint, &r)?;
            let variant: Variant = ckpt.meta.variant.parse()?;
            let (out, report) = inflate(&ckpt, &VariantConfig::of(variant), r.seed)?;
            start(&r)?;
            save_checkpoint(&out, &r.out.join("schanger_init.ckpt"))?;
            fs::write(r.out.join("inflation.txt"), report.table()).map_err(Error::from)?;
            println!(
                "copied {} tensors, new {} tensors, new params {} ({:.1}% of {})",
                report.copied_paths.len(),
                report.new_paths.len(),
                report.new_param_count,
                100.0 * report.delta_fraction,
                report.new_param_count + report.copied_param_count
            );
            Ok(())
        }
        Command::Train {
            common,
            flags,
            data,
            split,
            checkpoint,
            fraction,
        } => {
            let r = resolve("train", &common, Some(&flags))?;
            let mut pairs: Vec<SamplePair> = load_cd_dataset(&data_root(data, &r)?, &split)?;
            if let Some(f) = fraction {
                pairs = few_shot_subset(&pairs, f, r.seed)?;
            }
            let (g, init) = match &checkpoint {
                Some(p) => open_checkpoint(p, &r)?,
                None => {
                    let g = ModelGraph::new(Mode::Schanger, VariantConfig::of(r.variant))?;
                    let c = g.init(r.seed)?;
                    (g, c)
                }
            };
            if g.mode != Mode::Schanger {
                return Err(Error::Config("train needs an SChanger checkpoint; run `inflate` first".into()).into());
            }
            start(&r)?;
            let result = train(&g, init, TrainData::Pairs(&pairs), &r.setup, progress)?;
            write_run(&r.out, "model", &result)
        }
        Command::Eval {
            common,
            data,
            split,
            checkpoint,
            tile,
            threshold,
        } => {
            let mut r = resolve("eval", &common, None)?;
            r.eval.tile = tile.unwrap_or(r.eval.tile);
            r.eval.threshold = threshold.unwrap_or(r.eval.threshold);
            let root = data_root(data, &r)?;
            let (g, ckpt) = open_checkpoint(&checkpoint, &r)?;
            start(&r)?;
            let report = match g.mode {
                Mode::Schanger => {
                    let pairs = load_cd_dataset(&root, &split)?;
                    evaluate(&g, &ckpt, EvalData::Pairs(&pairs), r.eval.tile, r.eval.threshold)?
                }
                Mode::Spnet => {
                    let s = load_single_dataset(&root, &split)?;
                    evaluate(&g, &ckpt, EvalData::Single(&s), r.eval.tile, r.eval.threshold)?
                }
            };
            println!("{}", report.metrics);
            let c = report.metrics.counts;
            println!("tp {} fp {} fn {} tn {} ({} samples, {} skipped)", c.tp, c.fp, c.fn_, c.tn, report.evaluated, report.skipped.len());
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            fs::write(r.out.join("metrics.json"), json).map_err(Error::from)?;
            Ok(())
        }
        Command::Predict {
            common,
            data,
            split,
            checkpoint,
            tile,
            threshold,
        } => {
            let mut r = resolve("predict", &common, None)?;
            r.eval.tile = tile.unwrap_or(r.eval.tile);
            r.eval.threshold = threshold.unwrap_or(r.eval.threshold);
            let root = data_root(data, &r)?;
            let (g, ckpt) = open_checkpoint(&checkpoint, &r)?;
            start(&r)?;
            let items: Vec<(String, _, Option<_>, _)> = match g.mode {
                Mode::Schanger => load_cd_dataset(&root, &split)?.into_iter().map(|p| (p.id, p.t1, Some(p.t2), p.mask)).collect(),
                Mode::Spnet => load_single_dataset(&root, &split)?.into_iter().map(|s| (s.id, s.image, None, s.mask)).collect(),
            };
            for (id, t1, t2, truth) in &items {
                let prob = predict_probs(&g, &ckpt, t1, t2.as_ref(), r.eval.tile)?;
                let pred = binarize(&prob, r.eval.threshold)?;
                write_prediction(Prediction::Mask(&pred), &r.out.join(format!("{id}_mask.png")))?;
                write_prediction(Prediction::Composite { pred: &pred, truth }, &r.out.join(format!("{id}_composite.png")))?;
            }
            println!("wrote {} predictions to {}", items.len(), r.out.display());
            Ok(())
        }
        Command::Analyze { common, convention } => {
            let r = resolve("analyze", &common, None)?;
            let conv = match convention {
                ConventionArg::TwiceMacs => FlopsConvention::TwiceMacs,
                ConventionArg::Macs => FlopsConvention::Macs,
            };
            let variants = match r.variant_flag {
                Some(v) => vec![v],
                None => vec![Variant::Small, Variant::Base],
            };
            let reports = variants
                .iter()
                .map(|&v| VariantReport::new(&VariantConfig::of(v)))
                .collect::<schanger_core::Result<Vec<_>>>()?;
            let table = emit_table(&reports, conv);
            print!("{table}");
            let mut ok = true;
            for rep in &reports {
                for c in rep.checks() {
                    println!(
                        "{:<6} {:<32} {:>10.4}  target {:.4}  range [{:.4}, {:.4}]",
                        if c.pass() { "pass" } else { "FAIL" },
                        c.name,
                        c.value,
                        c.target,
                        c.low,
                        c.high
                    );
                }
                println!("{} reconciled: {}", rep.variant.name, rep.reconciled());
                ok &= rep.reconciled();
            }
            if common.out.is_some() || common.config.is_some() {
                start(&r)?;
                fs::write(r.out.join("table.txt"), &table).map_err(Error::from)?;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure {
                    code: 5,
                    message: "accounting falls outside the declared tolerances".into(),
                })
            }
        }
        Command::Synth {
            common,
            n,
            holdout,
            size,
            density,
        } => {
            let mut r = resolve("synth", &common, None)?;
            r.synth.n = n.unwrap_or(r.synth.n);
            r.synth.holdout = holdout.unwrap_or(r.synth.holdout);
            r.synth.size = size.unwrap_or(r.synth.size);
            r.synth.density = density.unwrap_or(r.synth.density);
            let s = &r.synth;
            let all = synth_generate(r.seed, s.n + s.holdout, s.size, s.density)?;
            start(&r)?;
            let pairs: Vec<SamplePair> = all.iter().map(|x| x.pair.clone()).collect();
            let (train_pairs, test_pairs) = pairs.split_at(s.n);
            write_cd_dataset(&r.out, "train", train_pairs)?;
            write_cd_dataset(&r.out, "test", test_pairs)?;
            let footprints: Vec<Sample> = all[..s.n].iter().map(|x| x.footprint_sample()).collect();
            write_single_dataset(&r.out, "pretrain", &footprints)?;
            println!(
                "wrote {} training and {} held-out pairs plus {} footprint samples to {}",
                train_pairs.len(),
                test_pairs.len(),
                footprints.len(),
                r.out.display()
            );
            Ok(())
        }
    }
}
