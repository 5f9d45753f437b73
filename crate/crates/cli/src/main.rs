mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rmgpt_core::config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "rmgpt", version, about = "Token-based foundation model for rotating machinery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML) layered over its preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when the config names none, or when no config is given.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.run_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize, inspect or split datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Self-supervised masked pretraining on every configured manifest.
    Pretrain(Common),
    /// Supervised adaptation of a checkpoint on the labeled manifests.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "prompt")]
        mode: AdaptMode,
    },
    /// Score a checkpoint on the held-out side of each labeled manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score every record instead of the held-out side.
        #[arg(long)]
        all: bool,
    },
    /// k-shot prompt adaptation sweep on each diagnosis manifest.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16")]
        k: Vec<usize>,
        /// Number of split seeds per k.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Counted flops, parameter counts and timings for the model and its ablations.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Timed repetitions per measurement; 0 skips timing.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Write health tokens, prototypes and their 2D projection as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AdaptMode {
    Prompt,
    Finetune,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Diagnosis,
    Prognosis,
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Generate a synthetic bearing dataset (manifest plus f32 payloads).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "diagnosis")]
        kind: SynthKind,
        /// Records per class (diagnosis) or number of lives (prognosis).
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        /// Records per life in prognosis mode.
        #[arg(long, default_value_t = 40)]
        life_steps: usize,
    },
    /// Print a manifest summary and its window count.
    Inspect {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Print a record split: `--k` per class, or a held-out fraction.
    Split {
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the split here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<rmgpt_core::Error> for CliError {
    fn from(e: rmgpt_core::Error) -> Self {
        match e {
            rmgpt_core::Error::Config(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    rmgpt_core::ModelError,
    rmgpt_core::dataset::DataError,
    rmgpt_core::training::checkpoint::CheckpointError,
    toml::ser::Error
);

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RMGPT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("RMGPT_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Data(DataCommand::Synth {
            out,
            kind,
            n,
            seed,
            name,
            channels,
            life_steps,
        }) => commands::data_synth(&out, kind, n, seed, &name, channels, life_steps),
        Command::Data(DataCommand::Inspect { manifest, config, preset }) => commands::data_inspect(&manifest, config.as_deref(), &preset),
        Command::Data(DataCommand::Split {
            manifest,
            k,
            test_fraction,
            seed,
            out,
        }) => commands::data_split(&manifest, k, test_fraction, seed, out.as_deref()),
        Command::Pretrain(common) => commands::pretrain(&common),
        Command::Adapt { common, checkpoint, mode } => {
            let mode = match mode {
                AdaptMode::Prompt => rmgpt_core::training::TrainMode::Prompt,
                AdaptMode::Finetune => rmgpt_core::training::TrainMode::Finetune,
            };
            commands::adapt(&common, &checkpoint, mode)
        }
        Command::Eval { common, checkpoint, all } => commands::eval(&common, &checkpoint, all),
        Command::Fewshot { common, checkpoint, k, repeats } => commands::fewshot(&common, &checkpoint, &k, repeats),
        Command::Bench { common, repeats } => commands::bench(&common, repeats),
        Command::ExportEmbeddings { common, checkpoint } => commands::export(&common, &checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
