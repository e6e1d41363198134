//! `tsvae`: train, detect, evaluate, benchmark, and synthesize.

mod commands;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsvae::config::{Preset, RunConfig};
use tsvae::ingest::Format;
use tsvae::Parallelism;

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "tsvae", version, about = "Image-encoded hierarchical VAE anomaly detector for univariate series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per series and write checkpoints and training logs.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Write untrained test-mode stub checkpoints instead of training.
        #[arg(long, value_enum)]
        stub: Option<StubKind>,
    },
    /// Score every series with its checkpoint and write detection reports.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory (default: `<out>/checkpoints`).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Compare detection reports against labels and write F1 tables.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Report directory (default: `<out>/reports`).
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Row name in the summary table.
        #[arg(long, default_value = "tsvae")]
        model_name: String,
    },
    /// Train, detect and evaluate every series of a dataset directory.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "tsvae")]
        model_name: String,
    },
    /// Write a labelled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StubKind {
    Identity,
    Zero,
}

/// Flags mirroring the keys of the TOML run configuration; flags win over the file.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Series file or dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    epoch: Option<usize>,
    #[arg(long)]
    epoch_gan: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_vae: Option<f64>,
    #[arg(long)]
    lr_gan: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save an intermediate checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Score through sampled latents with this seed instead of posterior means.
    #[arg(long)]
    sampling_seed: Option<u64>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Skip series whose outputs already exist.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Default,
    Compact,
    Miniature,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for `<id>.csv` files and `labels.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of series (the default corpus has ten).
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    #[arg(long, default_value_t = 100.0)]
    pub period: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 3)]
    pub anomalies: usize,
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: tsvae::Error| e.to_string())
}

impl RunArgs {
    /// File (or defaults), then flags.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(Failure::usage)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.data.is_some() {
            c.data.path = self.data.clone();
        }
        if self.labels.is_some() {
            c.data.labels = self.labels.clone();
        }
        set!(c.data.format, self.format);
        set!(c.output.dir, self.out);
        set!(c.window.size, self.window);
        set!(c.window.step, self.step);
        if let Some(p) = self.preset {
            c.model.preset = match p {
                PresetArg::Default => Preset::Default,
                PresetArg::Compact => Preset::Compact,
                PresetArg::Miniature => Preset::Miniature,
            };
        }
        set!(c.train.epoch, self.epoch);
        set!(c.train.epoch_gan, self.epoch_gan);
        set!(c.train.batch_size, self.batch_size);
        set!(c.train.lr_vae, self.lr_vae);
        set!(c.train.lr_gan, self.lr_gan);
        set!(c.train.alpha, self.alpha);
        set!(c.train.beta, self.beta);
        set!(c.train.margin, self.margin);
        set!(c.train.seed, self.seed);
        set!(c.train.checkpoint_every, self.checkpoint_every);
        set!(c.detect.theta, self.theta);
        set!(c.detect.lambda, self.lambda);
        if self.sampling_seed.is_some() {
            c.detect.sampling_seed = self.sampling_seed;
        }
        if self.sequential {
            c.train.parallelism = Parallelism::Sequential;
            c.detect.parallelism = Parallelism::Sequential;
        }
        c.validate().map_err(Failure::usage)?;
        Ok(c)
    }

    pub fn resume(&self) -> bool {
        self.resume
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { run, stub } => commands::train(&run, stub),
        Command::Detect { run, checkpoints } => commands::detect(&run, checkpoints),
        Command::Evaluate { run, reports, model_name } => commands::evaluate(&run, reports, &model_name),
        Command::Benchmark { run, model_name } => commands::benchmark(&run, &model_name),
        Command::Synth(args) => commands::synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
