//! `kdseg`: generate synthetic data, run incremental experiments and merge
//! their metrics tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdseg::data::diff_dataset;
use kdseg::data::synth::{self, SyntheticSpec};
use kdseg::distill::{BranchSet, DistillConfig, DistillVariant};
use kdseg::experiment::{self, ExperimentConfig};
use kdseg::metrics::{self, parse_metrics_csv};
use kdseg::scenario::{ClassOrdering, ScenarioMode};
use kdseg::segnet::FreezePolicy;
use kdseg::trainer::{AugmentSpec, TrainConfig};
use kdseg::{Error, Result};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "kdseg", version, about = "Incremental segmentation experiments on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Gen(GenArgs),
    /// Train M0 and every incremental step of a scenario.
    Run(RunArgs),
    /// Merge the metrics tables of several runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of classes including background.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    images: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Class c appears with weight skew^(c-1).
    #[arg(long, default_value_t = 0.5)]
    skew: f64,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Check that `--out` already holds exactly these files instead of writing.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "add-last-1")]
    scenario: String,
    /// learning or labeling.
    #[arg(long, default_value = "learning")]
    mode: ScenarioMode,
    /// given, alphabetical or frequency.
    #[arg(long, default_value = "given")]
    order: ClassOrdering,
    /// Comma-separated: none, cls-t, enc, dec, spkd, spkd-avg.
    #[arg(long, default_value = "none", value_delimiter = ',')]
    distill: Vec<DistillVariant>,
    /// Weight of the distillation term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Temperature for cls-t.
    #[arg(long, default_value_t = 2.0)]
    temp: f64,
    /// Dilation branches (1-4) matched by dec.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    dec_branches: Vec<usize>,
    /// none, encoder or first-two.
    #[arg(long, default_value = "none")]
    freeze: FreezePolicy,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    steps_per_class: usize,
    /// Starting learning rate for M0.
    #[arg(long, default_value_t = 0.1)]
    lr_initial: f64,
    /// Starting learning rate for incremental steps.
    #[arg(long, default_value_t = 0.05)]
    lr_incremental: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_end: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    /// Crop only: no flips and no rescaling.
    #[arg(long)]
    no_augment: bool,
    /// Row label in the metrics table.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories or metrics CSV files.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let (variant, extra) = match self.distill.split_first() {
            Some((v, rest)) => (*v, rest.to_vec()),
            None => (DistillVariant::None, Vec::new()),
        };
        let distill = DistillConfig {
            variant,
            extra,
            lambda_d: self.lambda,
            temperature: self.temp,
            dec_branches: BranchSet::new(&self.dec_branches)?,
        };
        let base = TrainConfig {
            lr_end: self.lr_end,
            steps_per_class: self.steps_per_class,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            batch_size: self.batch_size,
            crop: self.crop,
            seed: self.seed,
            augment: if self.no_augment { AugmentSpec::none() } else { AugmentSpec::default() },
            ..TrainConfig::default()
        };
        let cfg = ExperimentConfig {
            scenario: self.scenario.clone(),
            mode: self.mode,
            ordering: self.order,
            initial: TrainConfig { lr_start: self.lr_initial, ..base.clone() },
            incremental: TrainConfig { lr_start: self.lr_incremental, distill, freeze: self.freeze, ..base },
            method: self.name.clone(),
            ..ExperimentConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        images: args.images,
        size: args.size,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes,
        seed: args.seed,
        skew: args.skew,
    };
    if args.verify {
        let dataset = synth::generate(&spec)?;
        let differing = diff_dataset(&dataset, &args.out);
        if !differing.is_empty() {
            return Err(Error::Data(format!(
                "{} file(s) under {} differ, first {}",
                differing.len(),
                args.out.display(),
                differing[0]
            )));
        }
        println!("{}: {} images verified", args.out.display(), args.images);
    } else {
        let manifest = synth::generate_to(&spec, &args.out)?;
        println!("{}: {} images, {} classes", args.out.display(), manifest.records.len(), args.classes);
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let rows = experiment::run_to_dir(&args.data, &args.out, &cfg)?;
    for r in rows {
        let pct = |v: Option<f64>| metrics::format_percent(v);
        println!(
            "{} M{}: mIoU {} (old {}, new {}) mPA {} mCA {}",
            r.method,
            r.step,
            pct(r.m_iou),
            pct(r.m_iou_old),
            pct(r.m_iou_new),
            pct(r.m_pa),
            pct(r.m_ca)
        );
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<metrics::MetricsTable> {
    let file = if path.is_dir() { experiment::metrics_path(path) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::Io { path: file.clone(), source: e })?;
    parse_metrics_csv(&text).map_err(|e| e.context(file.display().to_string()))
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let tables = args.runs.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let merged = metrics::merge_tables(&tables)?;
    let mut buf = Vec::new();
    metrics::write_table(&mut buf, &merged)?;
    fs::write(&args.out, buf).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    println!("{}: {} rows", args.out.display(), merged.rows.len());
    Ok(())
}

/// Parameter errors are usage errors; everything else failed at runtime.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Context { source, .. } => exit_code(source),
        Error::Param(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KDSEG_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
