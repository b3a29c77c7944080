use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ncs_robust_cli::commands::{self, Options, ResidueAction, SimulateArgs};

#[derive(Parser)]
#[command(name = "ncsr", version, about = "Robust stability of feedback loops over uncertain channels")]
struct Cli {
    /// Omit the generation timestamp so output is byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stability margin b of the nominal loop.
    Margin { config: PathBuf },
    /// Full robust stability analysis across all channels.
    Analyze { config: PathBuf },
    /// Incremental residue bookkeeping in a journal file.
    Residue {
        #[arg(long)]
        ledger: PathBuf,
        #[command(subcommand)]
        action: ResidueCmd,
    },
    /// Time-domain simulation, or replay of a certificate config.
    Simulate {
        config: PathBuf,
        /// Injection stage k (default: every stage).
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for CSV traces of the first trial.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Build a destabilization certificate when the residue is not positive.
    Certify {
        config: PathBuf,
        /// Write a replayable config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ResidueCmd {
    Init { config: PathBuf },
    Add { label: String, r: f64 },
    Mod { label: String, r: f64 },
    Del { label: String },
    Show,
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options { deterministic: cli.deterministic };
    let result = match cli.command {
        Command::Margin { config } => commands::cmd_margin(&config, opts),
        Command::Analyze { config } => commands::cmd_analyze(&config, opts),
        Command::Residue { ledger, action } => {
            let action = match action {
                ResidueCmd::Init { config } => ResidueAction::Init { config },
                ResidueCmd::Add { label, r } => ResidueAction::Add { label, r },
                ResidueCmd::Mod { label, r } => ResidueAction::Mod { label, r },
                ResidueCmd::Del { label } => ResidueAction::Del { label },
                ResidueCmd::Show => ResidueAction::Show,
                ResidueCmd::Verify => ResidueAction::Verify,
            };
            commands::cmd_residue(&ledger, action, opts)
        }
        Command::Simulate { config, stage, trials, seed, traces } => {
            commands::cmd_simulate(&config, SimulateArgs { stage, trials, seed, traces }, opts)
        }
        Command::Certify { config, out } => commands::cmd_certify(&config, out.as_deref(), opts),
    };
    let code = match result {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.report).expect("serializable report"));
            outcome.code
        }
        Err(err) => {
            if let Some(report) = &err.report {
                println!("{}", serde_json::to_string_pretty(report).expect("serializable report"));
            }
            eprintln!("ncsr: {err}");
            err.code
        }
    };
    ExitCode::from(code as u8)
}
