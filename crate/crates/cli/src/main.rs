use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lungvit_core::data::{generate_synthetic, ImageFormat, MaskStyle, PipelineMode, Split, SynthSpec};
use lungvit_core::harness::{
    self, format_epoch_table, resume_training, run_compare, run_training, score_file, TrainConfig, TrainOutcome,
};
use lungvit_core::{Error, Result};

/// Train and evaluate Vision Transformer classifiers on chest radiographs.
#[derive(Parser)]
#[command(name = "lungvit", version)]
struct Cli {
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write per-epoch reports and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Train the full-image and masked pipelines with the same settings.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compute metrics from a `label,score_0,...` prediction file.
    Score {
        predictions: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Generate a synthetic radiograph-like dataset with train and test splits.
    Synth(SynthArgs),
    /// Render a report CSV as SVG curves.
    Plot {
        report: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Masks::Lungs)]
    masks: Masks,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Masked,
}

#[derive(Clone, Copy, ValueEnum)]
enum Masks {
    Lungs,
    Ones,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Pgm,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn summary(out: &TrainOutcome) {
    if !out.reports.is_empty() {
        print!("{}", format_epoch_table(&out.reports));
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
}

fn synth(args: &SynthArgs) -> Result<()> {
    let base = SynthSpec {
        mask_style: match args.masks {
            Masks::Lungs => MaskStyle::Lungs,
            Masks::Ones => MaskStyle::Ones,
        },
        format: match args.format {
            Format::Png => ImageFormat::Png,
            Format::Pgm => ImageFormat::Pgm,
        },
        ..SynthSpec::new(args.classes, 0, args.size, args.seed)
    };
    for (split, per_class, seed) in [
        (Split::Train, args.train_per_class, args.seed),
        (Split::Test, args.test_per_class, args.seed.wrapping_add(1)),
    ] {
        let spec = SynthSpec {
            split,
            per_class,
            seed,
            ..base.clone()
        };
        let m = generate_synthetic(&spec, &args.out)?;
        println!(
            "{}: {} images ({})",
            args.out.join(format!("{split}.csv")).display(),
            m.len(),
            m.count_report()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, mode, resume } => {
            let mut cfg = run.config()?;
            if let Some(m) = mode {
                cfg.pipeline_mode = match m {
                    Mode::Full => PipelineMode::Full,
                    Mode::Masked => PipelineMode::Masked,
                };
            }
            let out = match resume {
                Some(ck) => resume_training(&cfg, &ck)?,
                None => run_training(&cfg)?,
            };
            summary(&out);
        }
        Command::Compare { run } => {
            let cfg = run.config()?;
            let arm = |mode| TrainConfig {
                pipeline_mode: mode,
                ..cfg.clone()
            };
            run_compare(&arm(PipelineMode::Full), &arm(PipelineMode::Masked))?;
            let table = cfg.out_dir.join(harness::COMPARE_TABLE_FILE);
            print!("{}", read(&table)?);
            println!("comparison: {}", cfg.out_dir.join(harness::COMPARE_FILE).display());
        }
        Command::Score { predictions, out } => {
            score_file(&predictions, &out)?;
            print!("{}", read(&out)?);
        }
        Command::Synth(args) => synth(&args)?,
        Command::Plot { report, out } => {
            let rows = harness::plot_report(&report, &out)?;
            println!("{}: {rows} epochs", out.display());
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
