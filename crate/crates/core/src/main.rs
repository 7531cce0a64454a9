use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bowunida::exp::{
    cmd_ablation, cmd_eval, cmd_generate, cmd_layer_analysis, cmd_train, ExpError, Variant,
};

#[derive(Parser)]
#[command(name = "bowunida", version, about = "Word-prototype universal domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, target and pretext datasets.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train one variant and write its log and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full_spa")]
        variant: String,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out target split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// NTR/DIS per backbone layer over several seeds.
    LayerAnalysis {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_seeds: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train and evaluate all five variants over several seeds.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_seeds: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), ExpError> {
    match cli.command {
        Command::Generate { config, out, seed_override } => {
            let meta = cmd_generate(&config, &out, seed_override)?;
            println!("{}", serde_json::to_string_pretty(&meta).expect("meta serializes"));
        }
        Command::Train { config, data, out, variant, seed_override } => {
            let v = Variant::parse(&variant).ok_or_else(|| {
                ExpError::Validation(format!(
                    "unknown variant {variant:?}; expected one of {}",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })?;
            let o = cmd_train(&config, &data, &out, v, seed_override)?;
            println!("checkpoint {}", o.checkpoint.display());
            println!("log {}", o.log.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let r = cmd_eval(&checkpoint, &data, &out)?;
            println!(
                "h_score {:.4} shared_acc {:.4} private_acc {:.4}",
                r.h_score, r.shared_acc, r.private_acc
            );
        }
        Command::LayerAnalysis { config, data, out, n_seeds, seed_override } => {
            let t = cmd_layer_analysis(&config, &data, &out, n_seeds, seed_override)?;
            print!("{}", t.to_csv());
        }
        Command::Ablation { config, data, out, n_seeds, seed_override } => {
            let t = cmd_ablation(&config, &data, &out, n_seeds, seed_override)?;
            print!("{}", t.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
