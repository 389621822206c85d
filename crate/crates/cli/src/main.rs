use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssprobe::pipeline::{self, RunConfig, RunSummary};

/// Self-supervised probing for misclassification detection, OOD detection
/// and calibration.
#[derive(Parser)]
#[command(name = "ssprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits into the run directory.
    GenData(Args),
    /// Train the classifier and the probing heads.
    Train(Args),
    /// Misclassification detection report and probing-confidence analysis.
    EvalMisclass(Args),
    /// Out-of-distribution detection report.
    EvalOod(Args),
    /// Calibration report.
    Calibrate(Args),
    /// Probing-task ablation report.
    Ablate(Args),
    /// Export embeddings and logits in the ingest layout.
    Export(Args),
    /// Evaluate embeddings extracted elsewhere (mode = ingest).
    Ingest(Args),
    /// Every stage in order.
    Run(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Configuration file of `key = value` lines.
    #[arg(short, long)]
    config: PathBuf,
}

fn print_summary(s: &RunSummary) {
    println!("test accuracy {:.4}", s.misclass.test_accuracy);
    for (m, r) in &s.misclass.rows {
        println!("misclassification {m:<12} AUROC {:.4}", r.auroc.unwrap_or(f64::NAN));
    }
    for (m, r) in &s.calibration.rows {
        println!("calibration {m:<19} ECE {:.4}", r.ece.unwrap_or(f64::NAN));
    }
}

fn run(cli: Cli) -> ssprobe::Result<()> {
    let (Command::GenData(a)
    | Command::Train(a)
    | Command::EvalMisclass(a)
    | Command::EvalOod(a)
    | Command::Calibrate(a)
    | Command::Ablate(a)
    | Command::Export(a)
    | Command::Ingest(a)
    | Command::Run(a)) = &cli.command;
    let cfg = RunConfig::load(&a.config)?;
    match cli.command {
        Command::GenData(_) => {
            for f in pipeline::gen_data(&cfg)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Train(_) => {
            let s = pipeline::train(&cfg)?;
            println!(
                "train accuracy {:.4}, val accuracy {:.4}",
                s.train_accuracy, s.val_accuracy
            );
            for (task, acc) in &s.heads {
                println!("probing head {task}: training accuracy {acc:.4}");
            }
            println!("checkpoint sha256 {}", s.checkpoint_sha256);
        }
        Command::EvalMisclass(_) => {
            let (r, probes) = pipeline::eval_misclass(&cfg)?;
            for (m, rep) in &r.rows {
                println!("{m:<12} AUROC {:.4}", rep.auroc.unwrap_or(f64::NAN));
            }
            for p in &probes {
                println!(
                    "{:<20} spearman {:.3} point-biserial {:.4}",
                    p.name, p.spearman, p.point_biserial
                );
            }
        }
        Command::EvalOod(_) => {
            for (m, rep) in pipeline::eval_ood(&cfg)?.rows {
                println!("{m:<12} AUROC {:.4}", rep.auroc.unwrap_or(f64::NAN));
            }
        }
        Command::Calibrate(_) => {
            for (m, rep) in pipeline::calibrate(&cfg)?.rows {
                println!("{m:<19} ECE {:.4}", rep.ece.unwrap_or(f64::NAN));
            }
        }
        Command::Ablate(_) => {
            for r in pipeline::ablate(&cfg)? {
                println!("{:<45} AUROC {:.4}", r.label, r.auroc);
            }
        }
        Command::Export(_) => println!("wrote {}", pipeline::export(&cfg)?.display()),
        Command::Ingest(_) => print_summary(&pipeline::ingest(&cfg)?),
        Command::Run(_) => print_summary(&pipeline::run_all(&cfg)?),
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
