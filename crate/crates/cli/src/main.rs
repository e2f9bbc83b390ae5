use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod report;
mod settings;

use settings::RunConfig;

/// Quantization-aware U-Net training with learnable per-layer bitwidths.
#[derive(Debug, Parser)]
#[command(name = "qunet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset in the benign/malignant/normal layout.
    GenSynth(SynthArgs),
    /// Train, writing CSV logs and the best checkpoint.
    Train(RunArgs),
    /// Metrics of a checkpoint or exported model on one split.
    Eval(EvalArgs),
    /// Convert a checkpoint into a packed integer model file.
    Export(ExportArgs),
    /// Run an integer model on one image.
    Infer(InferArgs),
    /// Render SVG charts from a training run's CSV logs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    img_size: usize,
    /// Standard deviation of the background noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

/// Flags shared by the commands that build or train a model. Unset flags
/// fall back to the `--config` file, then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset root (benign/, malignant/, normal/).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Separate learning rate for the bitwidth parameters.
    #[arg(long)]
    bit_lr: Option<f64>,
    /// Weight of the average-bitwidth regularizer.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Channels of the first encoder block.
    #[arg(long)]
    base: Option<usize>,
    #[arg(long)]
    img_size: Option<usize>,
    #[arg(long)]
    init_bitwidth: Option<f64>,
    #[arg(long)]
    act_bits: Option<u32>,
    /// Train the floating-point baseline instead.
    #[arg(long)]
    float: bool,
    /// TOML file with any of the above settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, commands::CliError> {
        let file = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        Ok(RunConfig {
            data: self.data.clone().or(file.data),
            out: self.out.clone().or(file.out),
            epochs: self.epochs.or(file.epochs),
            batch: self.batch.or(file.batch),
            lr: self.lr.or(file.lr),
            bit_lr: self.bit_lr.or(file.bit_lr),
            lambda: self.lambda.or(file.lambda),
            seed: self.seed.or(file.seed),
            base: self.base.or(file.base),
            img_size: self.img_size.or(file.img_size),
            init_bitwidth: self.init_bitwidth.or(file.init_bitwidth),
            act_bits: self.act_bits.or(file.act_bits),
            float: if self.float { Some(true) } else { file.float },
        }
        .with_defaults())
    }
}

#[derive(Debug, clap::ValueEnum, Clone, Copy, PartialEq, Eq)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    checkpoint: Option<PathBuf>,
    /// Exported integer model to evaluate instead.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Dataset used for calibration when activation scales are unset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    img_size: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output directory for mask.png and prob.png.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    img_size: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding metrics.csv, layer_bitwidths.csv, loss_components.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the SVG files (defaults to the input directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), commands::CliError> {
    let Ok(raw) = std::env::var("QUNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        commands::CliError::Usage(format!(
            "QUNET_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    init_threads()?;
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a.out, a.n, a.seed, a.img_size, a.noise),
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Eval(a) => commands::eval(
            a.checkpoint.as_deref(),
            a.model.as_deref(),
            a.split,
            &a.run.resolve()?,
        ),
        Command::Export(a) => {
            commands::export(&a.checkpoint, &a.out, a.data.as_deref(), a.img_size)
        }
        Command::Infer(a) => commands::infer(&a.model, &a.image, &a.out, a.img_size),
        Command::Report(a) => report::emit_report(&a.data, a.out.as_deref().unwrap_or(&a.data)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.exit_code())
        }
    }
}
