use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::eval::ConvergencePolicy;
use super::FederationConfig;
use crate::error::{Error, Result};
use crate::model::Footprint;

pub const REPORT_SCHEMA: &str = "report_v1";
pub const CSV_HEADER: &str = "round,global_acc,pers_acc,cum_params,cum_bytes,cum_flops";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_acc: Option<f64>,
    pub pers_acc: Option<f64>,
    /// Scalars transmitted so far, extra scalars included.
    pub cum_params: u64,
    pub cum_bytes: u64,
    pub cum_flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Global,
    Personalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub strategy: String,
    pub hyperparameters: Value,
    pub seed: u64,
    pub fold: Option<usize>,
    pub federation: FederationConfig,
    /// Flat configuration echo filled in by the benchmark driver.
    pub config: BTreeMap<String, String>,
    pub convergence: ConvergencePolicy,
    pub convergence_round: Option<usize>,
    pub primary_metric: Metric,
    pub effective_rounds: usize,
    pub client_sizes: Vec<usize>,
    pub footprint: Footprint,
    pub deviations: Vec<String>,
    pub warnings: Vec<String>,
    pub flags: Vec<String>,
    pub details: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<RoundRecord>,
    pub convergence_round: Option<usize>,
    pub manifest: Manifest,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad {field} value `{s}`")))
}

fn parse_int<T: std::str::FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {field} value `{s}`")))
}

impl RunReport {
    /// Accuracy series the convergence rule and summaries use.
    pub fn primary_series(&self) -> Vec<f64> {
        primary_series(&self.records, self.manifest.primary_metric)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.primary_series().last().copied()
    }

    pub fn to_csv(&self) -> String {
        records_to_csv(&self.records)
    }

    pub fn manifest_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn primary_series(records: &[RoundRecord], metric: Metric) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match metric {
            Metric::Global => r.global_acc,
            Metric::Personalized => r.pers_acc,
        })
        .collect()
}

pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            opt(r.global_acc),
            opt(r.pers_acc),
            r.cum_params,
            r.cum_bytes,
            r.cum_flops
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing report_v1 header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("expected 6 columns in `{line}`")));
            }
            Ok(RoundRecord {
                round: parse_int("round", f[0])?,
                global_acc: parse_opt("global_acc", f[1])?,
                pers_acc: parse_opt("pers_acc", f[2])?,
                cum_params: parse_int("cum_params", f[3])?,
                cum_bytes: parse_int("cum_bytes", f[4])?,
                cum_flops: parse_int("cum_flops", f[5])?,
            })
        })
        .collect()
}
