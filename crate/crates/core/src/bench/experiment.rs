use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{DatasetSource, ExperimentConfig, PartitionKind};
use super::io::write_atomic;
use crate::data::{
    apply_feature_shift, gen_synthetic, partition_kfold, read_fds_file, Dataset, PartitionMethod, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation_with, NoObserver, RunInputs, RunReport};
use crate::strategies::StrategyConfig;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => gen_synthetic(spec, cfg.seed),
        DatasetSource::File { path } => read_fds_file(path),
    }
}

/// Client partitions and test sets for one cross-validation fold, plus any
/// partitioning warnings.
pub fn fold_inputs(cfg: &ExperimentConfig, dataset: &Dataset, fold: usize) -> Result<(RunInputs, Vec<String>)> {
    let p = &cfg.partition;
    let split = partition_kfold(dataset, p.folds, fold, cfg.seed)?;
    let method = match p.method {
        PartitionKind::Kfold => {
            return Ok((
                RunInputs {
                    clients: split.clients,
                    test: split.test,
                    client_tests: None,
                },
                Vec::new(),
            ))
        }
        PartitionKind::Quantity => PartitionMethod::Quantity {
            proportions: p.proportions.clone(),
        },
        PartitionKind::Dirichlet => PartitionMethod::Dirichlet {
            clients: cfg.federation.clients,
            concentration: p.concentration,
        },
        PartitionKind::FeatureShift => PartitionMethod::FeatureShift {
            shifts: p.shifts.clone(),
            proportions: p.proportions.clone(),
        },
    };
    let pool = Dataset::concat(&split.clients)?;
    let (clients, warnings) = PartitionPlan {
        method,
        seed: cfg.seed,
    }
    .apply(&pool)?;
    let client_tests = match p.method {
        PartitionKind::FeatureShift => {
            let copies = vec![split.test.clone(); clients.len()];
            Some(apply_feature_shift(&copies, &p.shifts, cfg.seed.wrapping_add(1))?)
        }
        _ => None,
    };
    Ok((
        RunInputs {
            clients,
            test: split.test,
            client_tests,
        },
        warnings,
    ))
}

/// Runs one (strategy, fold) pair and stamps the manifest with the fold and
/// the flat configuration it came from.
pub fn run_job(cfg: &ExperimentConfig, dataset: &Dataset, strategy: &StrategyConfig, fold: usize) -> Result<RunReport> {
    let (inputs, warnings) = fold_inputs(cfg, dataset, fold)?;
    let outcome = run_federation_with(&cfg.federation, strategy, inputs, &mut NoObserver)?;
    let mut report = outcome.report;
    report.manifest.fold = Some(fold);
    report.manifest.config = cfg.entries.iter().filter(|(k, _)| *k != "out").map(|(k, v)| (k.clone(), v.clone())).collect();
    report.manifest.warnings.extend(warnings);
    Ok(report)
}

#[derive(Debug)]
pub struct JobFailure {
    pub strategy: String,
    pub fold: usize,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    /// Report CSVs written, in (strategy, fold) order.
    pub reports: Vec<PathBuf>,
    pub failures: Vec<JobFailure>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn report_dir(out: &Path, strategy: &str, fold: usize) -> PathBuf {
    out.join(strategy).join(format!("fold{fold}"))
}

/// Executes every (strategy, fold) pair in parallel and writes each report
/// pair atomically. A failing job does not stop the others.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let dataset = load_dataset(cfg)?;
    let jobs: Vec<(&StrategyConfig, usize)> = cfg
        .strategies
        .iter()
        .flat_map(|s| cfg.partition.run_folds.iter().map(move |&f| (s, f)))
        .collect();
    let results: Vec<Result<PathBuf>> = jobs
        .par_iter()
        .map(|&(strategy, fold)| {
            let report = run_job(cfg, &dataset, strategy, fold)?;
            let dir = report_dir(out, strategy.kind().name(), fold);
            write_atomic(&dir.join("manifest.json"), report.manifest_json()?.as_bytes())?;
            let csv = dir.join("report.csv");
            write_atomic(&csv, report.to_csv().as_bytes())?;
            Ok(csv)
        })
        .collect();
    let mut summary = RunSummary::default();
    for ((strategy, fold), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(p) => summary.reports.push(p),
            Err(error) => summary.failures.push(JobFailure {
                strategy: strategy.kind().name().to_string(),
                fold,
                error,
            }),
        }
    }
    Ok(summary)
}
