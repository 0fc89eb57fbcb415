use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use linkpat_cli::{cmd_baseline, cmd_eval, cmd_explain, cmd_train, QuerySpec, SplitChoice};

#[derive(Parser)]
#[command(name = "linkpat", version, about = "Temporal link prediction from link-pattern images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        config: PathBuf,
        /// Directory that receives run directories; overrides `output_dir`.
        #[arg(long, env = "LINKPAT_OUTPUT_ROOT")]
        output_root: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of negative-sampling seeds, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Per-repeat report as CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Explain one query with a class activation map.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Link index, or `source,destination,timestamp`.
        #[arg(long)]
        query: QuerySpec,
        #[arg(long, default_value = "explanation.json")]
        output: PathBuf,
        /// Also write the activation map as a PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Score a split with the edge-memory baseline.
    Baseline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Treat (u, v) and (v, u) as the same edge.
        #[arg(long)]
        undirected: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, output_root } => {
            let s = cmd_train(&config, output_root.as_deref(), |e| {
                eprintln!(
                    "epoch {:>3}  train_loss {:.5}  val_auc {:.4}  ({:.1}s)",
                    e.epoch, e.train_loss, e.val_auc, e.epoch_seconds
                )
            })?;
            println!(
                "best epoch {} val_auc {:.4}; run written to {}",
                s.best_epoch,
                s.best_val_auc,
                s.run_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            seed,
            repeats,
            output,
        } => {
            let s = cmd_eval(&checkpoint, &dataset, split, seed, repeats, output.as_deref())?;
            match s.std_auc {
                Some(std) => println!("auc {:.4} ± {:.4} over {} seeds", s.mean_auc, std, repeats),
                None => println!("auc {:.4}", s.mean_auc),
            }
        }
        Command::Explain {
            checkpoint,
            dataset,
            query,
            output,
            heatmap,
        } => {
            let r = cmd_explain(&checkpoint, &dataset, &query, &output, heatmap.as_deref())?;
            println!("score {:.4}; explanation written to {}", r.score, output.display());
        }
        Command::Baseline {
            dataset,
            split,
            seed,
            undirected,
            output,
        } => {
            let r = cmd_baseline(&dataset, split, seed, !undirected, output.as_deref())?;
            println!("auc {:.4}", r.auc);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
