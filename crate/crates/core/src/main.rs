use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradharm::commands;

/// Log verbosity, in env_logger filter syntax (e.g. `info`, `gradharm=debug`).
const LOG_ENV: &str = "GRADHARM_LOG";

#[derive(Parser)]
#[command(name = "gradharm", version, about = "Gradient harmonization experiments on synthetic tri-modal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV export of the dataset.
        #[arg(long)]
        csv: bool,
    },
    /// Train a model and write its checkpoint and step log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot retrieval on the clean evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-triplet gradient conflict probe and separation report.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> gradharm::Result<()> {
    match cli.command {
        Command::GenData { config, out, csv } => {
            let s = commands::cmd_gen_data(&config, &out, csv)?;
            println!(
                "wrote {} triplets to {} (text misaligned {:.3}, audio misaligned {:.3})",
                s.n_samples,
                s.path.display(),
                s.text_misaligned,
                s.audio_misaligned
            );
        }
        Command::Train { config, data, out } => {
            let s = commands::cmd_train(&config, &data, &out)?;
            println!(
                "trained {} steps ({} updates, {} dropped); final loss_va {:.4} loss_vt {:.4}; checkpoint {}",
                s.steps,
                s.updates,
                s.drops,
                s.final_loss_va,
                s.final_loss_vt,
                s.checkpoint.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
        } => {
            let r = commands::cmd_eval(&config, &checkpoint, &data, &out)?;
            let recalls: Vec<String> = r
                .recall_at_k
                .iter()
                .map(|(k, v)| format!("R@{k} {v:.3}"))
                .collect();
            println!(
                "{} queries: {}, median rank {}",
                r.n_queries,
                recalls.join(", "),
                r.median_rank
            );
        }
        Command::Diagnose {
            config,
            checkpoint,
            data,
            out,
        } => {
            let r = commands::cmd_diagnose(&config, &checkpoint, &data, &out)?;
            let s = &r.separation;
            println!(
                "probed {} triplets: auc {:.3}, mean cos aligned {:.4} vs misaligned {:.4}, negative fraction {:.3}",
                r.probe_size, s.auc, s.mean_cos_aligned, s.mean_cos_misaligned, r.negative_fraction
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
