use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rifle_lab::{cmd_grad_probe, cmd_make_data, cmd_oracle, cmd_train, RunOptions};

#[derive(Parser)]
#[command(
    name = "rifle-lab",
    version,
    about = "Fine-tuning experiments with periodic head re-initialization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for running seeds.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune every seed; write telemetry, gradient norms and a summary.
    Train(Common),
    /// Teacher-student transfer experiment.
    Oracle(Common),
    /// Fine-tune every seed; write gradient norms only.
    GradProbe(Common),
    /// Write the synthetic classification CSVs.
    MakeData(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, common): (fn(&std::path::Path, &RunOptions) -> _, _) = match cli.command {
        Command::Train(c) => (cmd_train, c),
        Command::Oracle(c) => (cmd_oracle, c),
        Command::GradProbe(c) => (cmd_grad_probe, c),
        Command::MakeData(c) => (cmd_make_data, c),
    };
    let opts = RunOptions {
        out: common.out,
        jobs: common.jobs.map(usize::from),
    };
    match run(&common.config, &opts) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
