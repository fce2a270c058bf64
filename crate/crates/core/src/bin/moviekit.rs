use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moviekit::run::{default_config, run, Command, ErrorRecord, Invocation};

#[derive(Parser)]
#[command(name = "moviekit", version, about = "Train, distill and run the video editing pipeline")]
struct Cli {
    /// Root every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iters=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved defaults for the command and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write the synthetic train/val corpora.
    GenData,
    /// Train the big and tiny autoencoders.
    TrainAutoencoder,
    /// Train the three-pass editing denoiser.
    TrainBase,
    /// Distill guidance scales into a one-pass student.
    DistillGuidance,
    /// Convert the guided student to v-prediction.
    FinetuneV,
    /// Adversarial single-step distillation.
    DistillAdversarial,
    /// Edit a clip with one pipeline variant.
    EditVideo,
    /// FLOPs and NFE per frame for the variant ladder.
    ProfileFlops,
    /// Held-out metrics of the trained stages.
    Eval,
    /// Line charts of every run's metrics.
    Plot,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainAutoencoder => Command::TrainAutoencoder,
            Cmd::TrainBase => Command::TrainBase,
            Cmd::DistillGuidance => Command::DistillGuidance,
            Cmd::FinetuneV => Command::FinetuneV,
            Cmd::DistillAdversarial => Command::DistillAdversarial,
            Cmd::EditVideo => Command::EditVideo,
            Cmd::ProfileFlops => Command::ProfileFlops,
            Cmd::Eval => Command::Eval,
            Cmd::Plot => Command::Plot,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cmd = Command::from(cli.command);
    if cli.print_defaults {
        return match default_config(cmd) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(cmd, &e),
        };
    }
    let inv = Invocation {
        workdir: cli.workdir,
        config: cli.config,
        overrides: cli.overrides,
    };
    match run(cmd, &inv) {
        Ok(dir) => {
            log::info!("{cmd} finished: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(cmd, &e),
    }
}

fn fail(cmd: Command, e: &moviekit::Error) -> ExitCode {
    let rec = ErrorRecord::new(cmd, e);
    eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(2)
}
