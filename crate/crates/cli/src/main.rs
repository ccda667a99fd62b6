mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::RunOptions;

/// Multi-person motion prediction with a mixture of selective state-space experts.
///
/// Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
/// failures while running.
#[derive(Parser)]
#[command(name = "stmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the model and the trainer.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`, where the resolved config and outputs are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl From<&RunArgs> for RunOptions {
    fn from(a: &RunArgs) -> Self {
        RunOptions {
            config: a.config.clone(),
            seed: a.seed,
            out_dir: a.out_dir.clone(),
        }
    }
}

#[derive(Args)]
struct Inputs {
    /// Trained checkpoint (STMC).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset (MMP1).
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-person dataset.
    Synth {
        /// Generator settings (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset path (MMP1).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes config.toml, train_log.jsonl and final.stmc to the output directory.
    Train(RunArgs),
    /// Print and write the JPE/APE table of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Write predictions (observed frames followed by predicted frames) as a dataset.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        inputs: Inputs,
        /// Output dataset path (MMP1).
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-sample gate logits and weights, one line per sample and layer.
    InspectRouting {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        inputs: Inputs,
        /// Output text file of routing records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export every expert's pooled output for randomly chosen samples.
    ExportFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        inputs: Inputs,
        /// Output feature file (STFX).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to draw (all samples when the dataset has fewer).
        #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
    },
    /// Time the bidirectional block across sequence lengths and fit the growth exponent.
    Bench {
        /// Bench settings (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for bench.csv and the resolved settings.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), failure::Failure> {
    match cli.command {
        Command::Synth { spec, out, seed } => commands::synth(spec.as_deref(), &out, seed),
        Command::Train(run) => commands::train(&(&run).into()),
        Command::Eval { run, inputs } => commands::eval(&(&run).into(), &inputs.checkpoint, &inputs.dataset),
        Command::Predict { run, inputs, out } => {
            commands::predict_cmd(&(&run).into(), &inputs.checkpoint, &inputs.dataset, &out)
        }
        Command::InspectRouting { run, inputs, out } => {
            commands::inspect_routing(&(&run).into(), &inputs.checkpoint, &inputs.dataset, &out)
        }
        Command::ExportFeatures {
            run,
            inputs,
            out,
            samples,
        } => commands::export_features(
            &(&run).into(),
            &inputs.checkpoint,
            &inputs.dataset,
            &out,
            samples as usize,
        ),
        Command::Bench { config, out_dir } => commands::bench(config.as_deref(), &out_dir),
    }
}

fn main() -> ExitCode {
    let schema = config::schema_help();
    let mut cmd = Cli::command().after_long_help(schema.clone());
    for name in ["train", "eval", "predict", "inspect-routing", "export-features"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(schema.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
