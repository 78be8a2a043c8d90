use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedbench::bench::{
    cmd_costs, cmd_run, cmd_stats, cmd_summarize, env_entries, parse_entries, ExperimentConfig, StatsInput,
    ENV_PREFIX,
};
use fedbench::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Deterministic federated-learning benchmark runner.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's `out`, else `fedbench-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (strategy, fold) pair.
    Run(Common),
    /// Mean, std, optimal and below-baseline counts of final accuracy.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Run directories to read (default: the output directory).
        dirs: Vec<PathBuf>,
    },
    /// Communication cost at convergence and accuracy-vs-megabytes series.
    Costs {
        #[command(flatten)]
        common: Common,
        /// Run directories to read (default: the output directory).
        dirs: Vec<PathBuf>,
    },
    /// Pixel histograms and cross-client spread of pixel means.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Client datasets (FDS1 files). Without files the configured partition is used.
        files: Vec<PathBuf>,
        /// Augmented client datasets to compare against.
        #[arg(long, num_args = 1..)]
        after: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut entries = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            parse_entries(&text)?
        }
        None => Default::default(),
    };
    entries.extend(env_entries(std::env::vars(), ENV_PREFIX));
    if let Some(seed) = common.seed {
        entries.insert("seed".into(), seed.to_string());
    }
    ExperimentConfig::from_entries(entries)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("fedbench-out"))
}

fn dirs_or(dirs: Vec<PathBuf>, out: &Path) -> Vec<PathBuf> {
    if dirs.is_empty() {
        vec![out.to_path_buf()]
    } else {
        dirs
    }
}

fn report_excluded(excluded: &[String]) {
    for e in excluded {
        eprintln!("warning: excluded incomplete run {e}");
    }
}

fn execute(command: Command) -> Result<bool, Error> {
    match command {
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let summary = cmd_run(&cfg, &out)?;
            for p in &summary.reports {
                println!("{}", p.display());
            }
            for f in &summary.failures {
                eprintln!("error: {} fold {}: {}", f.strategy, f.fold, f.error);
            }
            Ok(summary.succeeded())
        }
        Command::Summarize { common, dirs } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let (table, excluded) = cmd_summarize(&dirs_or(dirs, &out), &out)?;
            report_excluded(&excluded);
            print!("{}", table.render());
            Ok(true)
        }
        Command::Costs { common, dirs } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let (rows, excluded) = cmd_costs(&dirs_or(dirs, &out), &out)?;
            report_excluded(&excluded);
            for r in rows {
                let flag = if r.convergence_round.is_some() { "" } else { " (not converged)" };
                println!(
                    "{:<8} fold{} round {:>3} {:>14} bytes  {:.3}%{flag}",
                    r.strategy,
                    r.fold,
                    r.cost_round,
                    r.bytes_at_cost_round,
                    100.0 * r.final_accuracy
                );
            }
            Ok(true)
        }
        Command::Stats { common, files, after } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let input = if files.is_empty() {
                StatsInput::Config(Box::new(cfg))
            } else {
                StatsInput::Files { before: files, after }
            };
            let stages = cmd_stats(&input, &out)?;
            for s in stages {
                let means: Vec<String> = s.means.iter().map(|m| format!("{m:.1}")).collect();
                println!("{:<7} means [{}]  std {:.1}", s.stage, means.join(", "), s.std_of_means);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
