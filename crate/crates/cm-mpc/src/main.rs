//! Thin command-line front end over the library orchestration.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
//! 3 gradient health-gate failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cm_mpc::config::RunConfig;
use cm_mpc::run;
use cm_mpc::Error;

#[derive(Parser)]
#[command(name = "cm-mpc", about = "Cost-matching learned MPC toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override (shorthand for --set train.master_seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path overrides, e.g. --set learner.step_size=1e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> cm_mpc::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.master_seed={seed}"));
        }
        RunConfig::load_with_overrides(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the on-policy training loop.
    Train(ConfigArgs),
    /// Disturbance benchmark comparing two parameter snapshots.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Baseline parameter snapshot (theta JSON).
        #[arg(long)]
        baseline: PathBuf,
        /// Learned parameter snapshot (theta JSON).
        #[arg(long)]
        learned: PathBuf,
    },
    /// Value-matching diagnostics plus the gradient health gate.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parameter snapshot to diagnose.
        #[arg(long)]
        theta: PathBuf,
    },
    /// Finite-difference audit of the rollout gradient.
    CheckGradients {
        #[command(flatten)]
        config: ConfigArgs,
        /// Optional parameter snapshot (defaults to the initial parameters).
        #[arg(long)]
        theta: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> cm_mpc::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let summary = run::cmd_train(&cfg)?;
            println!(
                "train: {} rounds complete ({} resumed), final parameters at {}",
                summary.rounds_completed,
                summary.resumed_rounds,
                summary.final_theta_path.display()
            );
            for (j, (pre, post)) in summary.val_mse_pre.iter().zip(&summary.val_mse_post).enumerate() {
                println!(
                    "round {j}: validation MSE {} -> {}",
                    pre.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into()),
                    post.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into()),
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { config, baseline, learned } => {
            let cfg = config.load()?;
            let summary = run::cmd_bench(&cfg, &baseline, &learned)?;
            let table = std::fs::read_to_string(&summary.report_txt)?;
            println!("{table}");
            println!("report: {}", summary.report_json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { config, theta } => {
            let cfg = config.load()?;
            let summary = run::cmd_diagnose(&cfg, &theta)?;
            println!(
                "diagnose: mse {:.6e}, rmse {:.6e} over {} anchors",
                summary.mse, summary.rmse, summary.anchors
            );
            println!(
                "gradient audit: max relative error {:.3e} (gate {:.1e})",
                summary.gradient_audit_max_rel,
                run::GRADIENT_GATE
            );
            if summary.gradient_gate_passed {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient health gate FAILED");
                Ok(ExitCode::from(3))
            }
        }
        Command::CheckGradients { config, theta } => {
            let cfg = config.load()?;
            let summary = run::cmd_check_gradients(&cfg, theta.as_deref())?;
            println!(
                "check-gradients: max relative error {:.3e} (gate {:.1e})",
                summary.gradient_audit_max_rel,
                run::GRADIENT_GATE
            );
            if summary.gradient_gate_passed {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient health gate FAILED");
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Io(_) | Error::Serde(_) => 1u8,
                _ => 2u8,
            })
        }
    }
}
