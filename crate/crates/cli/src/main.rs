//! `mov`: synthetic data, preprocessing, training, evaluation and ablations
//! for multimodal open-vocabulary video classification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mov_core::commands::{self, AblationAxis, PlotData, REPORT_FILE};
use mov_core::config::{RunConfig, CONFIG_SNAPSHOT};
use mov_core::fusion::{AuxModality, FusionMode};
use mov_core::trainer::TrainableLayers;

#[derive(Parser, Debug)]
#[command(name = "mov", version, about = "Multimodal open-vocabulary video classification on synthetic data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; flags override its values, which override defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed applied to synthesis, initialisation, pretraining and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (frames, audio, manifest).
    Synth(SynthArgs),
    /// Compute optical-flow images and log-mel spectrograms for a dataset.
    Preprocess(DataArgs),
    /// Contrastively pretrain the video and text encoders on captioned stills.
    Pretrain,
    /// Train fusion heads and the auxiliary encoder on base classes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on base and novel test splits.
    Eval(EvalArgs),
    /// Sweep one axis over its grid, one run per point.
    Ablate(AblateArgs),
    /// Aggregate finished runs into summary and per-class delta tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Total number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Base (training) classes; the rest are novel.
    #[arg(long)]
    base_classes: Option<usize>,
    /// Training samples per base class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory or manifest file (default: the config's data_dir).
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Modality {
    Flow,
    Audio,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fusion {
    VideoOnly,
    AuxOnly,
    ScoreFusion,
    CrossAttention,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Auxiliary modality.
    #[arg(long, value_enum)]
    modality: Option<Modality>,
    /// Fusion mode.
    #[arg(long, value_enum)]
    fusion: Option<Fusion>,
    /// Pretrained backbone directory written by `mov pretrain`.
    #[arg(long, value_name = "DIR")]
    backbone: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Auxiliary-encoder layers to fine-tune: a count or `all`.
    #[arg(long, value_name = "K|all")]
    trainable_layers: Option<TrainableLayers>,
    /// Weight of the video-branch loss.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory written by `mov train`.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Report path; a CSV summary is written beside it (default: <out>/report.json).
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Write per-class accuracy deltas against --reference, sorted descending.
    #[arg(long, value_name = "CSV", requires = "reference")]
    plot_data: Option<PathBuf>,
    /// Reference report for --plot-data.
    #[arg(long, value_name = "PATH")]
    reference: Option<PathBuf>,
    /// Temperature of the frozen video path on novel classes.
    #[arg(long)]
    tau_v: Option<f64>,
    /// Weight of the trained path when fusing novel-class scores.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Axis {
    TrainableLayers,
    FusionMode,
    TauV,
    Alpha,
    Beta,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Axis to sweep.
    #[arg(long, value_enum)]
    axis: Axis,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Training epochs per point.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories (holding report.json) or report files.
    #[arg(required = true, value_name = "RUN")]
    runs: Vec<PathBuf>,
}

fn base_config(g: &Global, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(x) = m.modality {
        cfg.model.aux = match x {
            Modality::Flow => AuxModality::Flow,
            Modality::Audio => AuxModality::Audio,
        };
    }
    if let Some(f) = m.fusion {
        cfg.model.fusion = match f {
            Fusion::VideoOnly => FusionMode::VideoOnly,
            Fusion::AuxOnly => FusionMode::AuxOnly,
            Fusion::ScoreFusion => FusionMode::ScoreFusion,
            Fusion::CrossAttention => FusionMode::CrossAttention,
        };
    }
    if let Some(b) = &m.backbone {
        cfg.paths.backbone = Some(b.clone());
    }
}

fn data_path(cfg: &RunConfig, d: &DataArgs) -> PathBuf {
    d.manifest.clone().unwrap_or_else(|| cfg.paths.data_dir.clone())
}

fn out_dir(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.cmd {
        Command::Synth(a) => {
            let mut cfg = base_config(g, None)?;
            let s = &mut cfg.synth;
            s.classes = a.classes.unwrap_or(s.classes);
            s.n_base = a.base_classes.unwrap_or(s.n_base);
            s.train_per_class = a.per_class.unwrap_or(s.train_per_class);
            s.test_per_class = a.test_per_class.unwrap_or(s.test_per_class);
            let out = g.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            cfg.paths.data_dir = out.clone();
            cfg.validate()?;
            let m = commands::synth(&cfg, &out)?;
            println!(
                "wrote {} samples ({} base, {} novel classes) to {}",
                m.records.len(),
                m.base_classes.len(),
                m.novel_classes.len(),
                out.display()
            );
        }
        Command::Preprocess(a) => {
            let cfg = base_config(g, None)?;
            cfg.validate()?;
            let data = data_path(&cfg, a);
            commands::preprocess(&cfg, &data)?;
            println!("preprocessed {}", data.display());
        }
        Command::Pretrain => {
            let cfg = base_config(g, None)?;
            let out = out_dir(g, "runs/backbone");
            commands::pretrain(&cfg, &out)?;
            println!("wrote backbone to {}", out.display());
        }
        Command::Train(a) => {
            let mut cfg = base_config(g, None)?;
            apply_model(&mut cfg, &a.model);
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            cfg.train.trainable_layers = a.trainable_layers.unwrap_or(cfg.train.trainable_layers);
            cfg.train.alpha = a.alpha.unwrap_or(cfg.train.alpha);
            cfg.validate()?;
            let out = out_dir(g, "runs/train");
            let o = commands::train(&cfg, &data_path(&cfg, &a.data), &out)?;
            println!(
                "trained {} steps, final-epoch accuracy {:.1}%, checkpoint {}",
                o.curve.len(),
                o.final_epoch_acc,
                out.display()
            );
        }
        Command::Eval(a) => {
            let mut cfg = base_config(g, Some(&a.checkpoint.join(CONFIG_SNAPSHOT)))?;
            cfg.inference.tau_v = a.tau_v.unwrap_or(cfg.inference.tau_v);
            cfg.inference.beta = a.beta.unwrap_or(cfg.inference.beta);
            cfg.validate()?;
            let report_path = a
                .report
                .clone()
                .unwrap_or_else(|| out_dir(g, "runs/eval").join(REPORT_FILE));
            let plot = match (&a.plot_data, &a.reference) {
                (Some(csv), Some(reference)) => Some(PlotData { csv, reference }),
                _ => None,
            };
            let r = commands::eval(&cfg, &a.checkpoint, &data_path(&cfg, &a.data), &report_path, plot)?;
            println!(
                "base {:.1}  novel {:.1}  harmonic mean {:.1}  ({})",
                r.base_acc,
                r.novel_acc,
                r.harmonic_mean,
                report_path.display()
            );
        }
        Command::Ablate(a) => {
            let mut cfg = base_config(g, None)?;
            apply_model(&mut cfg, &a.model);
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            cfg.validate()?;
            let axis = match a.axis {
                Axis::TrainableLayers => AblationAxis::TrainableLayers,
                Axis::FusionMode => AblationAxis::FusionMode,
                Axis::TauV => AblationAxis::TauV,
                Axis::Alpha => AblationAxis::Alpha,
                Axis::Beta => AblationAxis::Beta,
            };
            let out = out_dir(g, "runs/ablate");
            let t = commands::ablate(&cfg, axis, &data_path(&cfg, &a.data), &out)?;
            print!("{}", t.to_csv());
        }
        Command::Report(a) => {
            let out = out_dir(g, "runs/report");
            let o = commands::aggregate_reports(&a.runs, &out)?;
            for (run, e) in &o.errors {
                eprintln!("mov: {}: {e}", run.display());
            }
            println!("aggregated {} run(s) into {}", o.runs.len(), out.display());
            if !o.errors.is_empty() {
                bail!("{} of {} run(s) could not be aggregated", o.errors.len(), a.runs.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("mov: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
