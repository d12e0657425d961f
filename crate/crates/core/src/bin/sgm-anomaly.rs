use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgm_anomaly::config::RunConfig;
use sgm_anomaly::{pipeline, Error};

#[derive(Parser)]
#[command(version, about = "Score-based time-series anomaly detection")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for detection.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network on the training CSV.
    Train,
    /// Score every window of the test CSV.
    Detect,
    /// Threshold sweep and F1 curves for an anomaly CSV.
    Evaluate,
    /// Write a synthetic clean training CSV and a labelled test CSV.
    Synth,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={}", o.display()));
    }
    let cfg = match RunConfig::resolve(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: &Command, cfg: &RunConfig) -> sgm_anomaly::Result<()> {
    match command {
        Command::Synth => {
            let (train, test) = pipeline::cmd_synth(cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train => {
            let out = pipeline::cmd_train(cfg)?;
            let last = out.history.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} parameters for {} iterations, final loss {last:.5}; checkpoint {}",
                out.net.param_count(),
                out.history.len(),
                out.checkpoint.display()
            );
        }
        Command::Detect => {
            let s = pipeline::cmd_detect(cfg)?;
            let [p, r, l, g] = pipeline::mean_nfe(&s.nfe);
            let flagged = s.predicted.iter().filter(|&&y| y == 1).count();
            println!(
                "scored {} steps (tau={}, mode={}, threshold={:e}); {flagged} flagged",
                s.len(),
                s.tau,
                s.combination.name(),
                s.threshold
            );
            println!("mean NFE per window: purify {p:.1}, recon {r:.1}, prob {l:.1}, grad {g:.1}");
        }
        Command::Evaluate => {
            let out = pipeline::cmd_eval(cfg)?;
            println!("{:<5} {:>8} {:>8} {:>8} {:>12}", "mode", "F1", "F1_PA", "AUC", "threshold");
            for m in &out.modes {
                let r = &m.result;
                println!(
                    "{:<5} {:>8.4} {:>8.4} {:>8.4} {:>12.4e}",
                    m.combination.name(),
                    r.f1_plain,
                    r.f1_pa,
                    r.auc,
                    r.threshold
                );
            }
            println!("input column: {}", out.result.summary());
        }
    }
    Ok(())
}
