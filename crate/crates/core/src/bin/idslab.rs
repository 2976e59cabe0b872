use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idslab::runner::{run, Command, RunOptions};

#[derive(Parser)]
#[command(
    name = "idslab",
    version,
    about = "Score-distillation editing experiments (SDS, DDS, IDS)"
)]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Edit every task with every configured method.
    Edit(Common),
    /// Sweep FPR scale, iterations, step count and time range.
    Ablate(Common),
    /// Edit, then reconstruct the source by reversing the noise record.
    Invert(Common),
    /// Posterior-mean distance to the source before and after FPR.
    SweepPosterior(Common),
    /// Train the MLP denoiser.
    Train(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Verb::Edit(a) => (Command::Edit, a),
        Verb::Ablate(a) => (Command::Ablate, a),
        Verb::Invert(a) => (Command::Invert, a),
        Verb::SweepPosterior(a) => (Command::SweepPosterior, a),
        Verb::Train(a) => (Command::Train, a),
    };
    let opts = RunOptions {
        out: args.out,
        jobs: args.jobs,
        seed: args.seed,
    };
    match run(command, &args.config, &opts) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
