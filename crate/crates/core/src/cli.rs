//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::energy::{BankPotential, FeatureBank};
use crate::error::{Error, Result};
use crate::losses::compute_prototypes;
use crate::metrics::{auroc, fpr_at_95_tpr};
use crate::runner::{run_experiment, ExperimentConfig};
use crate::sampler::synthesize_outliers;
use crate::synthgen::{generate_dataset, write_points_jsonl};

#[derive(Debug, Parser)]
#[command(name = "hambr", version, about = "Boundary-aware outlier synthesis for noisy-label learning on the hypersphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full training pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize virtual outliers from a serialized feature bank.
    Synthesize {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print AUROC and FPR95 for two score files as JSON.
    EvalOod {
        #[arg(long)]
        id_scores: PathBuf,
        #[arg(long)]
        ood_scores: PathBuf,
    },
}

/// Reads scores given either as a JSON array or as whitespace-separated numbers.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Domain(format!("{}: bad score {tok:?}: {e}", path.display())))
        })
        .collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let records = run_experiment(cfg)?;
            if let Some(last) = records.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Synthesize { bank, config, out } => {
            let cfg = ExperimentConfig::from_json_file(&config)?.resolved();
            cfg.sampler.validate()?;
            cfg.energy.validate()?;
            let bank = FeatureBank::read_jsonl(&bank, cfg.bank_capacity)?;
            let prototypes: Vec<_> = compute_prototypes(&bank).present().map(|(_, p)| p.clone()).collect();
            let set = synthesize_outliers(&bank, &prototypes, &cfg.energy, &cfg.sampler)?;
            set.write_jsonl(&out, &BankPotential::new(&bank, cfg.energy))?;
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::from_json_file(&config)?.resolved();
            let data = generate_dataset(&cfg.dataset)?;
            write_points_jsonl(&data.points, &out)?;
        }
        Command::EvalOod { id_scores, ood_scores } => {
            let id = read_scores(&id_scores)?;
            let ood = read_scores(&ood_scores)?;
            let report = serde_json::json!({
                "auroc": auroc(&id, &ood)?,
                "fpr95": fpr_at_95_tpr(&id, &ood)?,
            });
            println!("{report}");
        }
    }
    Ok(())
}

/// Parses `args` and runs the chosen subcommand. Returns the process exit
/// code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
