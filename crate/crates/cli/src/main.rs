use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod overrides;

#[derive(Parser, Debug)]
#[command(name = "m3cs", version, about = "Masked point modeling with a discrete codebook")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining; writes a checkpoint and metrics.csv.
    Pretrain(CommonArgs),
    /// Supervised fine-tuning from a pretraining checkpoint.
    Finetune(CommonArgs),
    /// K-way N-shot episodes; writes fewshot_runs.csv and fewshot_summary.csv.
    Fewshot(CommonArgs),
    /// Test accuracy of a fine-tuning checkpoint.
    Eval(CommonArgs),
    /// Writes synthetic train/ and test/ datasets with manifests.
    GenData(CommonArgs),
    /// Token id of every patch center of one cloud.
    InspectCodebook(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config with flat dotted or nested keys.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Random initialization instead of a pretraining checkpoint.
    #[arg(long)]
    from_scratch: bool,
    /// Overrides as `--key value`; bare keys resolve to the command's section.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Pretrain(a) => ("pretrain", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Fewshot(a) => ("fewshot", a),
        Command::Eval(a) => ("eval", a),
        Command::GenData(a) => ("gen-data", a),
        Command::InspectCodebook(a) => ("inspect-codebook", a),
    };
    let run = || -> anyhow::Result<()> {
        let cfg = overrides::resolve(name, args.config.as_deref(), &args.overrides, args.from_scratch)?;
        match name {
            "pretrain" => commands::pretrain(&cfg),
            "finetune" => commands::finetune(&cfg),
            "fewshot" => commands::fewshot(&cfg),
            "eval" => commands::eval(&cfg),
            "gen-data" => commands::gen_data(&cfg),
            _ => commands::inspect_codebook(&cfg),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
