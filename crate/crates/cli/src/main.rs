use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcldr_cli::checks::GRADCHECK_TOLERANCE;
use gcldr_cli::commands::taylor_csv;
use gcldr_cli::{cmd_evaluate, cmd_export, cmd_generate, cmd_gradcheck, cmd_taylor, cmd_train, CliError, ExperimentConfig, ExportFormat};
use gcldr_core::trainer::Variant;

/// Cross-latent-domain recognition experiments.
#[derive(Parser)]
#[command(name = "gcldr", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run only this variant.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Parallel training runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "gcldr-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets as CSV.
    Generate,
    /// Train every configured variant and seed; write report.json and CSV tables.
    Train,
    /// Score a saved checkpoint on the test rows.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare backprop against finite differences for every objective.
    Gradcheck {
        /// Corrupt the analytic gradients (every check should then fail).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare the exact meta objective with its first-order expansion.
    Taylor,
    /// Convert a saved report.
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.evaluation.seeds = vec![s];
    }
    if let Some(v) = cli.variant {
        cfg.training.variants = vec![v];
    }
    cfg.validate()?;
    let first_seed = cfg.evaluation.seeds[0];

    match cli.command {
        Command::Generate => {
            for p in cmd_generate(&cfg, &cli.out)? {
                println!("{}", p.display());
            }
        }
        Command::Train => {
            let report = cmd_train(&cfg, cli.workers, Some(&cli.out))?;
            for a in &report.aggregate {
                println!(
                    "{:<15} ACC@1 {:.4} ± {:.4}  aAUC {:.4}  aBFR {:.4}  ({} runs)",
                    a.variant.name(),
                    a.acc1.mean,
                    a.acc1.std,
                    a.auc.mean,
                    a.bfr.mean,
                    a.runs
                );
            }
            println!("report: {}", cli.out.join("report.json").display());
        }
        Command::Evaluate { checkpoint, data } => {
            let variant = cfg.training.variants[0];
            let m = cmd_evaluate(&cfg, &checkpoint, variant, data.as_deref(), first_seed)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialise"));
        }
        Command::Gradcheck { inject_fault } => {
            let rows = cmd_gradcheck(&cfg, inject_fault)?;
            println!("{:<18} {:>5} {:>12} {:>8}  result", "loss", "seed", "max rel err", "entries");
            for r in &rows {
                println!(
                    "{:<18} {:>5} {:>12.3e} {:>8}  {}",
                    r.loss,
                    r.seed,
                    r.max_rel_error,
                    r.checked,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::CheckFailed(format!(
                    "{failed} of {} gradient checks above {GRADCHECK_TOLERANCE:e}",
                    rows.len()
                )));
            }
        }
        Command::Taylor => {
            let rows = cmd_taylor(&cfg, first_seed)?;
            let csv = taylor_csv(&rows)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join("taylor.csv"), &csv)?;
            print!("{csv}");
            if let Some(r) = rows.iter().find(|r| r.decay_ratio.is_some_and(|d| d < 50.0)) {
                return Err(CliError::CheckFailed(format!("error decayed only {:?}× at alpha {}", r.decay_ratio, r.alpha)));
            }
        }
        Command::Export { report, format } => {
            for p in cmd_export(&report, format, &cli.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCLDR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
