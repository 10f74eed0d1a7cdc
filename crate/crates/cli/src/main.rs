use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvstyle_cli::{
    cmd_ablate, cmd_evaluate, cmd_rerun, cmd_stylize, cmd_synth, cmd_train, exit_code, format_report, AblateArgs,
    EvaluateArgs, StylizeArgs, SynthArgs, TrainArgs, CHECKPOINT_FILE,
};

/// Train, apply and evaluate low-rank style adapters for multi-view scenes.
#[derive(Parser)]
#[command(name = "mvstyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and the condition module on one scene.
    Train(TrainArgs),
    /// Apply a trained checkpoint to a directory of images.
    Stylize(StylizeArgs),
    /// Score stylized views against their content and the style image.
    Evaluate(EvaluateArgs),
    /// Run paired toy trainings with one ingredient switched off.
    Ablate(AblateArgs),
    /// Write a synthetic multi-view scene and style image.
    Synth(SynthArgs),
    /// Repeat a recorded run into a new output directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| println!("wrote {}", a.out.join(CHECKPOINT_FILE).display())),
        Command::Stylize(a) => cmd_stylize(&a).map(|m| println!("wrote {} images to {}", m.artifacts.len(), a.out.display())),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|(_, r)| print!("{}", format_report(&r))),
        Command::Ablate(a) => cmd_ablate(&a).map(|(_, r)| print!("{}", r.to_table())),
        Command::Synth(a) => cmd_synth(&a).map(|_| println!("wrote scene to {}", a.out.display())),
        Command::Rerun { manifest, out } => cmd_rerun(&manifest, &out).map(drop),
    };
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
