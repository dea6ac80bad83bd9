//! Argument parsing and dispatch for the `advpose` binary.

use std::path::PathBuf;

use advpose_core::experiment::{self, ExperimentConfig, ExperimentError};
use advpose_core::models::Variant;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "advpose", version, about = "Adversarial 3D pose lifting experiments on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (TOML); built-in defaults when omitted
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory holding datasets, checkpoints and reports
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate lab, wild and xfer train/test datasets
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the generator (every configured seed unless --seed)
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adversarial training of one variant
    TrainAdv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Variant name; the config's variant when omitted
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a trained variant on the xfer and lab test splits
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run every variant over every seed and write the ablation matrix
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict to one variant
        #[arg(long)]
        variant: Option<String>,
    },
    /// Finite-difference check of every network architecture
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect training curves and metrics into report CSVs
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn variant(cfg: &ExperimentConfig, name: &Option<String>) -> Result<Variant, ExperimentError> {
    match name {
        Some(n) => n.parse().map_err(|e: advpose_core::models::ModelError| ExperimentError::Config(e.to_string())),
        None => cfg.variant(),
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

/// Executes one command. Returns the failure to report, if any.
pub fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let files = experiment::gen_data(&cfg, &common.out, &log)?;
            println!("wrote {} dataset files", files.len());
        }
        Command::Pretrain { common, seed } => {
            let cfg = load_config(&common)?;
            for s in seeds(&cfg, seed) {
                let run = experiment::pretrain(&cfg, &common.out, s, None, &log)?;
                match run.final_val() {
                    Some(v) => println!("seed {s}: final validation MPJPE {v:.2} mm"),
                    None => println!("seed {s}: done"),
                }
            }
        }
        Command::TrainAdv { common, seed, variant: name } => {
            let cfg = load_config(&common)?;
            let v = variant(&cfg, &name)?;
            for s in seeds(&cfg, seed) {
                let run = experiment::train_adv(&cfg, &common.out, s, v, None, &log)?;
                match run.final_val() {
                    Some(m) => println!("{v} seed {s}: final validation MPJPE {m:.2} mm"),
                    None => println!("{v} seed {s}: done"),
                }
            }
        }
        Command::Eval { common, seed, variant: name } => {
            let cfg = load_config(&common)?;
            let v = variant(&cfg, &name)?;
            for s in seeds(&cfg, seed) {
                for r in experiment::eval(&cfg, &common.out, s, v)? {
                    println!(
                        "{} seed {} {}: MPJPE {:.2} mm, aligned {:.2} mm, PCK3D {:.1}, AUC {:.1}, PCKh@0.5 {:.1}",
                        r.variant, r.seed, r.domain, r.mpjpe_p1, r.mpjpe_p2, r.pck3d, r.auc3d, r.pckh05
                    );
                }
            }
        }
        Command::Ablate { common, variant: name } => {
            let cfg = load_config(&common)?;
            let variants = match name {
                Some(_) => vec![variant(&cfg, &name)?],
                None => Variant::ALL.to_vec(),
            };
            let m = experiment::ablate(&cfg, &common.out, &variants, &log)?;
            for v in &variants {
                if let Some(x) = m.median_xfer_mpjpe(*v) {
                    println!("{v}: median xfer MPJPE {x:.2} mm");
                }
            }
            println!("{} of {} runs completed", m.completed(), m.rows.len());
        }
        Command::Gradcheck { seed } => {
            let lines = experiment::gradcheck_suite(seed).map_err(|e| ExperimentError::Train(e.to_string()))?;
            let mut ok = true;
            for l in &lines {
                ok &= l.passes();
                println!(
                    "{} {}: max relative error {:.3e} over {} entries (worst at tensor {} element {})",
                    if l.passes() { "PASS" } else { "FAIL" },
                    l.architecture,
                    l.report.max_rel_error,
                    l.report.checked,
                    l.report.worst.0,
                    l.report.worst.1
                );
            }
            if !ok {
                return Err(ExperimentError::Train(format!("gradient check above {:e}", experiment::GRADCHECK_TOL)));
            }
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let (curves, metrics) = experiment::report(&cfg, &common.out)?;
            println!("wrote {} and {}", curves.display(), metrics.display());
        }
    }
    Ok(())
}
