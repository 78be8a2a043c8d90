use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::write_atomic;
use crate::error::{Error, Result};
use crate::federation::{parse_csv, primary_series, Manifest, Metric, RoundRecord};
use crate::strategies::StrategyKind;

/// Row name for FedAvg's personalized accuracy, the baseline of
/// personalized strategies.
pub const PERSONALIZED_BASELINE: &str = "pfedavg";

#[derive(Clone, Debug)]
pub struct RunEntry {
    pub strategy: String,
    pub fold: usize,
    pub records: Vec<RoundRecord>,
    pub manifest: Manifest,
    pub dir: PathBuf,
}

impl RunEntry {
    pub fn final_accuracy(&self) -> Option<f64> {
        primary_series(&self.records, self.manifest.primary_metric).last().copied()
    }
}

#[derive(Debug, Default)]
pub struct LoadedRuns {
    pub runs: Vec<RunEntry>,
    /// Runs that were skipped, with the reason.
    pub excluded: Vec<String>,
}

fn load_one(dir: &Path) -> Result<RunEntry> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let records = parse_csv(&fs::read_to_string(dir.join("report.csv"))?)?;
    if records.len() != manifest.effective_rounds {
        return Err(Error::Format(format!(
            "{} of {} rounds recorded",
            records.len(),
            manifest.effective_rounds
        )));
    }
    let entry = RunEntry {
        strategy: manifest.strategy.clone(),
        fold: manifest.fold.unwrap_or(0),
        records,
        manifest,
        dir: dir.to_path_buf(),
    };
    if entry.final_accuracy().is_none() {
        return Err(Error::Format("no accuracy recorded".into()));
    }
    Ok(entry)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Collects `<strategy>/fold<r>` runs under each directory. Incomplete or
/// unreadable runs are listed in `excluded`.
pub fn load_runs(dirs: &[PathBuf]) -> Result<LoadedRuns> {
    let mut out = LoadedRuns::default();
    for root in dirs {
        for sdir in sorted_subdirs(root)? {
            for fdir in sorted_subdirs(&sdir)? {
                let is_fold = fdir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("fold"));
                if !is_fold {
                    continue;
                }
                match load_one(&fdir) {
                    Ok(e) => out.runs.push(e),
                    Err(e) => out.excluded.push(format!("{}: {e}", fdir.display())),
                }
            }
        }
    }
    out.runs.sort_by(|a, b| (strategy_rank(&a.strategy), a.fold).cmp(&(strategy_rank(&b.strategy), b.fold)));
    Ok(out)
}

fn strategy_rank(name: &str) -> (usize, String) {
    let idx = name
        .parse::<StrategyKind>()
        .ok()
        .and_then(|k| StrategyKind::ALL.iter().position(|x| *x == k))
        .unwrap_or(usize::MAX);
    (idx, name.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldCell {
    pub strategy: String,
    pub fold: usize,
    /// Final accuracy as a fraction.
    pub accuracy: f64,
    pub optimal: bool,
    pub below_baseline: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub folds: usize,
    /// Mean final accuracy in percent.
    pub mean_pct: f64,
    /// Population standard deviation over folds, in percent.
    pub std_pct: f64,
    pub optimal: usize,
    pub below_baseline: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<FoldCell>,
}

fn pct(x: f64) -> String {
    format!("{:.3}", 100.0 * x)
}

/// Mean and standard deviation of final accuracies per strategy, with
/// per-fold optimal and below-baseline marks. Global-metric strategies are
/// compared with FedAvg and personalized ones with FedAvg's personalized
/// accuracy on the same fold.
pub fn summarize(runs: &[RunEntry]) -> SummaryTable {
    let fedavg = StrategyKind::FedAvg.name();
    // (strategy, fold) -> (accuracy, metric)
    let mut cells: Vec<(String, usize, f64, Metric)> = Vec::new();
    for r in runs {
        let Some(acc) = r.final_accuracy() else { continue };
        cells.push((r.strategy.clone(), r.fold, acc, r.manifest.primary_metric));
        if r.strategy == fedavg && r.manifest.primary_metric == Metric::Global {
            if let Some(p) = primary_series(&r.records, Metric::Personalized).last() {
                cells.push((PERSONALIZED_BASELINE.to_string(), r.fold, *p, Metric::Personalized));
            }
        }
    }
    let baseline = |fold: usize, metric: Metric| -> Option<f64> {
        let name = match metric {
            Metric::Global => fedavg,
            Metric::Personalized => PERSONALIZED_BASELINE,
        };
        cells.iter().find(|c| c.0 == name && c.1 == fold).map(|c| c.2)
    };
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.0 != PERSONALIZED_BASELINE) {
        let b = best.entry(c.1).or_insert(f64::NEG_INFINITY);
        *b = b.max(c.2);
    }
    let marked: Vec<FoldCell> = cells
        .iter()
        .map(|(s, fold, acc, metric)| FoldCell {
            strategy: s.clone(),
            fold: *fold,
            accuracy: *acc,
            optimal: s != PERSONALIZED_BASELINE && best.get(fold) == Some(acc),
            below_baseline: s != fedavg
                && s != PERSONALIZED_BASELINE
                && baseline(*fold, *metric).is_some_and(|b| *acc < b),
        })
        .collect();

    let mut order: Vec<String> = Vec::new();
    for c in &marked {
        if !order.contains(&c.strategy) {
            order.push(c.strategy.clone());
        }
    }
    let rows = order
        .into_iter()
        .map(|s| {
            let mine: Vec<&FoldCell> = marked.iter().filter(|c| c.strategy == s).collect();
            let n = mine.len() as f64;
            let accs: Vec<f64> = mine.iter().map(|c| 100.0 * c.accuracy).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                folds: mine.len(),
                mean_pct: mean,
                std_pct: var.sqrt(),
                optimal: mine.iter().filter(|c| c.optimal).count(),
                below_baseline: mine.iter().filter(|c| c.below_baseline).count(),
                strategy: s,
            }
        })
        .collect();
    SummaryTable { rows, cells: marked }
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,folds,mean_acc_pct,std_acc_pct,optimal_count,below_baseline_count\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{},{}",
                r.strategy, r.folds, r.mean_pct, r.std_pct, r.optimal, r.below_baseline
            );
        }
        out
    }

    pub fn folds_csv(&self) -> String {
        let mut out = String::from("fold,strategy,final_acc_pct,optimal,below_baseline\n");
        let mut cells: Vec<&FoldCell> = self.cells.iter().collect();
        cells.sort_by_key(|c| c.fold);
        for c in cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.fold,
                c.strategy,
                pct(c.accuracy),
                c.optimal,
                c.below_baseline
            );
        }
        out
    }

    /// Plain-text table with `*` for optimal and `v` for below-baseline marks.
    pub fn render(&self) -> String {
        let folds: BTreeSet<usize> = self.cells.iter().map(|c| c.fold).collect();
        let mut out = format!("{:<10}", "strategy");
        for f in &folds {
            let _ = write!(out, " {:>10}", format!("fold{f}"));
        }
        let _ = writeln!(out, " {:>18} {:>7} {:>6}", "mean +- std", "optimal", "below");
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.strategy);
            for f in &folds {
                let cell = self.cells.iter().find(|c| c.strategy == r.strategy && c.fold == *f);
                let text = cell.map_or("-".to_string(), |c| {
                    format!(
                        "{}{}{}",
                        pct(c.accuracy),
                        if c.optimal { "*" } else { "" },
                        if c.below_baseline { "v" } else { "" }
                    )
                });
                let _ = write!(out, " {text:>10}");
            }
            let _ = writeln!(
                out,
                " {:>18} {:>7} {:>6}",
                format!("{:.3} +- {:.3}", r.mean_pct, r.std_pct),
                r.optimal,
                r.below_baseline
            );
        }
        out
    }
}

/// Loads the runs, writes `summary.csv` and `summary_folds.csv` into `out`
/// and returns the table with the list of excluded runs.
pub fn cmd_summarize(dirs: &[PathBuf], out: &Path) -> Result<(SummaryTable, Vec<String>)> {
    let loaded = load_runs(dirs)?;
    if loaded.runs.is_empty() {
        return Err(Error::InvalidArgument("no complete runs found".into()));
    }
    let table = summarize(&loaded.runs);
    write_atomic(&out.join("summary.csv"), table.to_csv().as_bytes())?;
    write_atomic(&out.join("summary_folds.csv"), table.folds_csv().as_bytes())?;
    Ok((table, loaded.excluded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub strategy: String,
    pub fold: usize,
    /// 1-based convergence round, if the run converged.
    pub convergence_round: Option<usize>,
    /// Round the cost is read at: the convergence round, else the last round.
    pub cost_round: usize,
    pub bytes_at_cost_round: u64,
    pub final_round: usize,
    pub bytes_final: u64,
    pub final_accuracy: f64,
}

pub fn cost_rows(runs: &[RunEntry]) -> Vec<CostRow> {
    runs.iter()
        .filter_map(|r| {
            let last = r.records.last()?;
            let conv = r
                .manifest
                .convergence_round
                .filter(|c| (1..=r.records.len()).contains(c));
            let cost_round = conv.unwrap_or(r.records.len());
            Some(CostRow {
                strategy: r.strategy.clone(),
                fold: r.fold,
                convergence_round: conv,
                cost_round,
                bytes_at_cost_round: r.records[cost_round - 1].cum_bytes,
                final_round: last.round,
                bytes_final: last.cum_bytes,
                final_accuracy: r.final_accuracy()?,
            })
        })
        .collect()
}

/// Accuracy against cumulative megabytes (10^6 bytes) per round.
fn series_tsv(run: &RunEntry) -> String {
    let mut out = String::from("mbytes\taccuracy_pct\n");
    for r in &run.records {
        let acc = match run.manifest.primary_metric {
            Metric::Global => r.global_acc,
            Metric::Personalized => r.pers_acc,
        };
        if let Some(a) = acc {
            let _ = writeln!(out, "{}\t{}", r.cum_bytes as f64 / 1e6, pct(a));
        }
    }
    out
}

/// Writes `costs.csv` and one `series/<strategy>_fold<r>.tsv` per run.
pub fn cmd_costs(dirs: &[PathBuf], out: &Path) -> Result<(Vec<CostRow>, Vec<String>)> {
    let loaded = load_runs(dirs)?;
    if loaded.runs.is_empty() {
        return Err(Error::InvalidArgument("no complete runs found".into()));
    }
    let rows = cost_rows(&loaded.runs);
    let mut csv = String::from(
        "strategy,fold,convergence_round,converged,bytes_at_convergence,final_round,bytes_final,final_acc_pct\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.fold,
            r.cost_round,
            r.convergence_round.is_some(),
            r.bytes_at_cost_round,
            r.final_round,
            r.bytes_final,
            pct(r.final_accuracy)
        );
    }
    write_atomic(&out.join("costs.csv"), csv.as_bytes())?;
    for run in &loaded.runs {
        let name = format!("{}_fold{}.tsv", run.strategy, run.fold);
        write_atomic(&out.join("series").join(name), series_tsv(run).as_bytes())?;
    }
    Ok((rows, loaded.excluded))
}
