use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::experiment::{fold_inputs, load_dataset};
use super::io::write_atomic;
use crate::data::{pixel_stats, read_fds_file, Dataset};
use crate::error::{Error, Result};
use crate::federation::PrepareContext;
use crate::strategies::{StrategyConfig, StrategyKind};

/// Per-client pixel statistics for one stage (e.g. before augmentation).
/// Means are reported on the 8-bit scale: `[-1, 1]` maps to `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageStats {
    pub stage: String,
    pub means: Vec<f64>,
    /// Population standard deviation of `means`.
    pub std_of_means: f64,
    pub histograms: Vec<Vec<f64>>,
}

fn to_8bit(x: f64) -> f64 {
    (x + 1.0) * 127.5
}

pub fn client_stats(stage: &str, clients: &[Dataset]) -> Result<StageStats> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no client datasets".into()));
    }
    let stats = clients.iter().map(pixel_stats).collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = stats.iter().map(|s| to_8bit(s.mean)).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64;
    Ok(StageStats {
        stage: stage.to_string(),
        means,
        std_of_means: var.sqrt(),
        histograms: stats.into_iter().map(|s| s.histogram).collect(),
    })
}

/// One row per stage: client means then their standard deviation.
pub fn stats_csv(stages: &[StageStats]) -> String {
    let width = stages.iter().map(|s| s.means.len()).max().unwrap_or(0);
    let mut out = String::from("stage");
    for k in 0..width {
        let _ = write!(out, ",client{k}_mean");
    }
    out.push_str(",std_of_means\n");
    for s in stages {
        out.push_str(&s.stage);
        for k in 0..width {
            match s.means.get(k) {
                Some(m) => {
                    let _ = write!(out, ",{m:.3}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{:.3}", s.std_of_means);
    }
    out
}

fn histogram_tsv(s: &StageStats) -> String {
    let mut out = String::new();
    for (k, h) in s.histograms.iter().enumerate() {
        out.push_str(&format!("client{k}"));
        for v in h {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub enum StatsInput {
    /// Client datasets from `FDS1` files, optionally with augmented copies.
    Files { before: Vec<PathBuf>, after: Vec<PathBuf> },
    /// Partitions of the configured experiment for its first fold; the
    /// augmented stage is added when the experiment runs Ours.
    Config(Box<ExperimentConfig>),
}

fn config_stages(cfg: &ExperimentConfig) -> Result<Vec<StageStats>> {
    let dataset = load_dataset(cfg)?;
    let fold = cfg.partition.run_folds[0];
    let (inputs, _) = fold_inputs(cfg, &dataset, fold)?;
    let mut stages = vec![client_stats("before", &inputs.clients)?];
    let ours = cfg.strategies.iter().find(|s| s.kind() == StrategyKind::Ours);
    if let Some(StrategyConfig::Ours(p)) = ours {
        if p.augment {
            let mut clients = inputs.clients.clone();
            let mut strategy = ours.expect("matched").build()?;
            strategy.prepare(&PrepareContext { fed: &cfg.federation }, &mut clients)?;
            stages.push(client_stats("after", &clients)?);
        }
    }
    Ok(stages)
}

/// Writes `stats.csv` and `histograms_<stage>.tsv` into `out`.
pub fn cmd_stats(input: &StatsInput, out: &Path) -> Result<Vec<StageStats>> {
    let stages = match input {
        StatsInput::Files { before, after } => {
            let read = |paths: &[PathBuf]| paths.iter().map(|p| read_fds_file(p)).collect::<Result<Vec<_>>>();
            let mut v = vec![client_stats("before", &read(before)?)?];
            if !after.is_empty() {
                v.push(client_stats("after", &read(after)?)?);
            }
            v
        }
        StatsInput::Config(cfg) => config_stages(cfg)?,
    };
    write_atomic(&out.join("stats.csv"), stats_csv(&stages).as_bytes())?;
    for s in &stages {
        write_atomic(&out.join(format!("histograms_{}.tsv", s.stage)), histogram_tsv(s).as_bytes())?;
    }
    Ok(stages)
}
