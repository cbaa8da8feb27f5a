use clap::{Parser, Subcommand};
use increseg::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "increseg",
    about = "Class-incremental semantic segmentation from image-level labels"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "increseg.toml")]
    config: PathBuf,

    /// Override any config key by dotted path, e.g. --set optimizer.initial.lr=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the seeded synthetic corpus (train + val) into the dataset dir.
    GenSynthetic,
    /// Compute per-task scenario splits and store them in the run dir.
    Split,
    /// Run the incremental tasks (optionally only up through --task N).
    Train {
        #[arg(long)]
        task: Option<usize>,
    },
    /// Evaluate completed task checkpoints on the validation corpus.
    Eval,
    /// Run the 2x2 fusion x augmentation ablation grid.
    Ablate,
}

fn run(cli: Cli) -> increseg::Result<()> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    match cli.command {
        Command::GenSynthetic => increseg::cli::cmd_gen_synthetic(&cfg),
        Command::Split => increseg::cli::cmd_split(&cfg),
        Command::Train { task } => increseg::cli::cmd_train(&cfg, task),
        Command::Eval => increseg::cli::cmd_eval(&cfg),
        Command::Ablate => increseg::cli::cmd_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": err.to_string(),
                "kind": format!("{err:?}").split(&['{', '('][..]).next().unwrap_or("Error").trim(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
