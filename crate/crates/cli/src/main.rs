use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use proxlearn::trainer::{self, ProxConfig};
use proxlearn::{grad, EstimateMode, Error};

#[derive(Parser)]
#[command(name = "proxlearn", version, about = "Wasserstein proximal training of shallow networks on weighted point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; resumes when the output directory holds a matching checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Score a checkpoint on the test split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the one named in the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "weighted")]
        mode: String,
        /// Also score the training split.
        #[arg(long)]
        train_split: bool,
    },
    /// Train once per value of a hyperparameter and tabulate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// epsilon, beta or N
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Compare the closed-form gradients with central differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out, seed, iterations } => {
            let mut cfg = ProxConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = iterations {
                cfg.iterations = k;
            }
            let summary = trainer::train(&cfg, &out)?;
            if let Some(k) = summary.resumed_from {
                println!("resumed from step {k}");
            }
            if summary.nonconverged_steps > 0 {
                eprintln!(
                    "warning: fixed-point iteration hit the cap of {} in {} of the steps run",
                    cfg.max_sinkhorn_iters, summary.nonconverged_steps
                );
            }
            let r = &summary.last_row;
            println!(
                "step {}  risk weighted {:.6e}  unweighted {:.6e}  ({:.1} s)",
                r.iter, r.risk_weighted, r.risk_unweighted, summary.seconds
            );
            println!("run directory {}", out.display());
        }
        Command::Eval { checkpoint, data, mode, train_split } => {
            let mode: EstimateMode = mode.parse()?;
            let (cloud, mut cfg) = trainer::load_run_checkpoint(&checkpoint)?;
            if let Some(path) = data {
                cfg.dataset = cfg.dataset.with_path(&path);
            }
            let prepared = trainer::prepare(&cfg)?;
            let report = trainer::evaluate(&cloud, &prepared.test, &prepared.spec, mode, cfg.normalize_weights)?;
            println!("{}", report.to_table());
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if train_split {
                let report = trainer::evaluate(&cloud, &prepared.train, &prepared.spec, mode, cfg.normalize_weights)?;
                println!("\ntraining split\n{}", report.to_table());
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            }
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = ProxConfig::load(&config)?;
            let rows = trainer::sweep(&cfg, &param, &values, &out)?;
            println!("{:>12} {:>14} {:>14} {:>10} {:>10}", param, "risk_w", "risk_u", "accuracy", "seconds");
            for r in rows {
                println!(
                    "{:>12} {:>14.6e} {:>14.6e} {:>10} {:>10.1}",
                    r.value,
                    r.final_risk_weighted,
                    r.final_risk_unweighted,
                    r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                    r.seconds
                );
            }
            println!("summary {}", out.join("sweep.csv").display());
        }
        Command::Gradcheck { trials, seed } => {
            let report = grad::gradcheck(trials, seed)?;
            println!("trials                  {}", report.trials);
            println!("binary drift part       {:.3e}", report.binary_v);
            println!("binary interaction part {:.3e}", report.binary_u);
            println!("multi-class             {:.3e}", report.multiclass);
            if report.max_error() > 1e-6 {
                return Err(Error::Numerical {
                    message: format!("gradient check failed: max relative error {:.3e} > 1e-6", report.max_error()),
                    step: None,
                });
            }
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
