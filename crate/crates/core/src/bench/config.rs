//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted paths such as `federation.rounds` or
//! `strategy.fedprox.mu`. Blank lines and `#` comments are ignored. Any key
//! can be overridden through the environment: `FEDBENCH_` followed by the
//! key in upper case with `.` written as `__`, e.g.
//! `FEDBENCH_FEDERATION__ROUNDS=10`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ShiftSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{EvalMode, FederationConfig};
use crate::model::ModelSpec;
use crate::strategies::{StrategyConfig, StrategyKind};

pub const ENV_PREFIX: &str = "FEDBENCH_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// An `FDS1` file.
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Kfold,
    Quantity,
    Dirichlet,
    FeatureShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub method: PartitionKind,
    /// Cross-validation folds; one is held out as the test set per run.
    pub folds: usize,
    /// Test folds to run.
    pub run_folds: Vec<usize>,
    pub concentration: f64,
    pub proportions: Vec<f64>,
    pub shifts: Vec<ShiftSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub strategies: Vec<StrategyConfig>,
    pub out: Option<PathBuf>,
    /// Every key/value the configuration was built from, after overrides.
    pub entries: BTreeMap<String, String>,
}

/// Parses `key = value` lines.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
        })?;
        let key = k.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(Error::config(format!("line {}", n + 1), "empty key"));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Config entries carried by environment variables with the given prefix.
pub fn env_entries<I>(vars: I, prefix: &str) -> BTreeMap<String, String>
where
    I: IntoIterator<Item = (String, String)>,
{
    vars.into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(prefix)
                .map(|rest| (rest.replace("__", ".").to_ascii_lowercase(), v))
        })
        .collect()
}

struct Entries {
    map: BTreeMap<String, String>,
    used: Vec<String>,
}

impl Entries {
    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.push(key.to_string());
        }
        v
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::config(key, format!("cannot parse `{s}` in `{v}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

fn json_scalar(v: &str) -> Value {
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        return Value::from(f);
    }
    match v.to_ascii_lowercase().as_str() {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "none" | "null" => Value::Null,
        _ => Value::String(v.to_string()),
    }
}

fn apply_strategy_param(config: &StrategyConfig, path: &str, value: &str, key: &str) -> Result<StrategyConfig> {
    let mut json = serde_json::to_value(config)?;
    let mut node = &mut json;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "strategy has no such parameter"))?;
        if *part == "name" || (!obj.contains_key(*part)) {
            return Err(Error::config(key, "strategy has no such parameter"));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), json_scalar(value));
            break;
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    let updated: StrategyConfig =
        serde_json::from_value(json).map_err(|e| Error::config(key, format!("`{value}`: {e}")))?;
    updated.validate().map_err(|e| match e {
        Error::Config { message, .. } => Error::config(key, message),
        other => other,
    })?;
    Ok(updated)
}

fn parse_shape(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(['x', 'X', ','])
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|d| *d > 0)
                .ok_or_else(|| Error::config(key, format!("bad shape `{v}`; expected e.g. 1x8x8")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_entries(parse_entries(text)?)
    }

    pub fn from_entries(map: BTreeMap<String, String>) -> Result<Self> {
        let mut e = Entries {
            map: map.clone(),
            used: Vec::new(),
        };
        let seed = e.get_or("seed", 0u64)?;
        let out = e.get::<PathBuf>("out")?;

        let dataset = match e.raw("dataset.kind").as_deref().unwrap_or("synthetic") {
            "synthetic" => {
                let d = SyntheticSpec::default();
                let shape = match e.raw("dataset.shape") {
                    Some(v) => parse_shape("dataset.shape", &v)?,
                    None => vec![1, 8, 8],
                };
                DatasetSource::Synthetic(SyntheticSpec {
                    classes: e.get_or("dataset.classes", d.classes)?,
                    samples_per_class: e.get_or("dataset.samples_per_class", 120)?,
                    shape,
                    class_signal: e.get_or("dataset.class_signal", d.class_signal)?,
                    noise_level: e.get_or("dataset.noise_level", 0.5)?,
                })
            }
            "fds" | "file" => DatasetSource::File {
                path: e
                    .get("dataset.path")?
                    .ok_or_else(|| Error::config("dataset.path", "required for file datasets"))?,
            },
            other => {
                return Err(Error::config(
                    "dataset.kind",
                    format!("unknown dataset kind `{other}`; use synthetic or fds"),
                ))
            }
        };

        let method = match e.raw("partition.method").as_deref().unwrap_or("kfold") {
            "kfold" => PartitionKind::Kfold,
            "quantity" => PartitionKind::Quantity,
            "dirichlet" => PartitionKind::Dirichlet,
            "feature_shift" | "feature-shift" => PartitionKind::FeatureShift,
            other => {
                return Err(Error::config(
                    "partition.method",
                    format!("unknown method `{other}`; use kfold, quantity, dirichlet or feature_shift"),
                ))
            }
        };
        let folds = e.get_or("partition.folds", 6usize)?;
        if folds < 2 {
            return Err(Error::config("partition.folds", "need at least two folds"));
        }
        let run_folds = match e.raw("partition.run_folds").as_deref() {
            None | Some("all") => (0..folds).collect(),
            Some(_) => {
                e.used.pop();
                let v: Vec<usize> = e.list("partition.run_folds")?.unwrap_or_default();
                if v.is_empty() || v.iter().any(|f| *f >= folds) {
                    return Err(Error::config("partition.run_folds", format!("folds must lie in 0..{folds}")));
                }
                v
            }
        };
        let concentration = e.get_or("partition.concentration", 0.5)?;
        let proportions = e.list("partition.proportions")?.unwrap_or_default();
        let brightness: Vec<f64> = e.list("partition.shift.brightness")?.unwrap_or_default();
        let contrast: Vec<f64> = e.list("partition.shift.contrast")?.unwrap_or_default();
        let noise: Vec<f64> = e.list("partition.shift.noise")?.unwrap_or_default();

        let clients_given = e.get::<usize>("federation.clients")?;
        let clients = match method {
            PartitionKind::Kfold => {
                if clients_given.is_some_and(|c| c != folds - 1) {
                    return Err(Error::config(
                        "federation.clients",
                        format!("k-fold with {folds} folds gives {} clients", folds - 1),
                    ));
                }
                folds - 1
            }
            PartitionKind::Quantity => {
                if proportions.is_empty() {
                    return Err(Error::config("partition.proportions", "required for quantity partitions"));
                }
                if clients_given.is_some_and(|c| c != proportions.len()) {
                    return Err(Error::config("federation.clients", "must match the number of proportions"));
                }
                proportions.len()
            }
            PartitionKind::Dirichlet => clients_given.unwrap_or(3),
            PartitionKind::FeatureShift => clients_given
                .or_else(|| [proportions.len(), brightness.len(), contrast.len(), noise.len()].into_iter().max())
                .filter(|c| *c > 0)
                .unwrap_or(3),
        };
        if method == PartitionKind::FeatureShift && !proportions.is_empty() && proportions.len() != clients {
            return Err(Error::config("partition.proportions", format!("{} values for {clients} clients", proportions.len())));
        }
        let shifts = if method == PartitionKind::FeatureShift {
            let pick = |v: &[f64], key: &str, default: f64| -> Result<Vec<f64>> {
                match v.len() {
                    0 => Ok(vec![default; clients]),
                    n if n == clients => Ok(v.to_vec()),
                    n => Err(Error::config(key, format!("{n} values for {clients} clients"))),
                }
            };
            let b = pick(&brightness, "partition.shift.brightness", 0.0)?;
            let c = pick(&contrast, "partition.shift.contrast", 1.0)?;
            let n = pick(&noise, "partition.shift.noise", 0.0)?;
            (0..clients)
                .map(|k| ShiftSpec {
                    brightness_offset: b[k],
                    contrast_scale: c[k],
                    noise_sigma: n[k],
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut federation = FederationConfig::new(clients, e.get_or("federation.rounds", 30)?, seed);
        federation.local_epochs = e.get_or("federation.local_epochs", federation.local_epochs)?;
        federation.batch_size = e.get_or("federation.batch_size", federation.batch_size)?;
        federation.eval_mode = match e.raw("federation.eval_mode").as_deref().unwrap_or("both") {
            "global" => EvalMode::Global,
            "personalized" => EvalMode::Personalized,
            "both" => EvalMode::Both,
            other => {
                return Err(Error::config(
                    "federation.eval_mode",
                    format!("unknown mode `{other}`; use global, personalized or both"),
                ))
            }
        };
        federation.model = match e.raw("model.kind").as_deref().unwrap_or("mlp") {
            "mlp" => ModelSpec::Mlp {
                hidden: e.get_or("model.hidden", 32)?,
            },
            "cnn" => ModelSpec::Cnn {
                channels: e.get_or("model.channels", 8)?,
            },
            other => return Err(Error::config("model.kind", format!("unknown model `{other}`; use mlp or cnn"))),
        };
        let o = &mut federation.optimizer;
        o.lr = e.get_or("optimizer.lr", o.lr)?;
        o.beta1 = e.get_or("optimizer.beta1", o.beta1)?;
        o.beta2 = e.get_or("optimizer.beta2", o.beta2)?;
        o.eps = e.get_or("optimizer.eps", o.eps)?;
        o.weight_decay = e.get_or("optimizer.weight_decay", o.weight_decay)?;
        federation.convergence.window = e.get_or("convergence.window", federation.convergence.window)?;
        federation.convergence.delta = e.get_or("convergence.delta", federation.convergence.delta)?;
        federation.validate()?;

        let kinds: Vec<StrategyKind> = e
            .list("strategies")?
            .unwrap_or_else(|| vec![StrategyKind::FedAvg]);
        if kinds.is_empty() {
            return Err(Error::config("strategies", "no strategies listed"));
        }
        let mut strategies: Vec<StrategyConfig> = Vec::new();
        for k in &kinds {
            if strategies.iter().any(|s| s.kind() == *k) {
                return Err(Error::config("strategies", format!("`{k}` listed twice")));
            }
            strategies.push(StrategyConfig::default_for(*k));
        }
        let param_keys: Vec<(String, String)> = map
            .iter()
            .filter(|(k, _)| k.starts_with("strategy."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (key, value) in param_keys {
            e.used.push(key.clone());
            let rest = &key["strategy.".len()..];
            let (name, path) = rest
                .split_once('.')
                .ok_or_else(|| Error::config(&key, "expected strategy.<name>.<parameter>"))?;
            let kind: StrategyKind = name.parse().map_err(|_| Error::config(&key, format!("unknown strategy `{name}`")))?;
            match strategies.iter_mut().find(|s| s.kind() == kind) {
                Some(s) => *s = apply_strategy_param(s, path, &value, &key)?,
                None => {
                    apply_strategy_param(&StrategyConfig::default_for(kind), path, &value, &key)?;
                }
            }
        }

        if let Some(unknown) = map.keys().find(|k| !e.used.contains(k)) {
            return Err(Error::config(unknown.as_str(), "unknown configuration key"));
        }
        Ok(ExperimentConfig {
            seed,
            dataset,
            partition: PartitionConfig {
                method,
                folds,
                run_folds,
                concentration,
                proportions,
                shifts,
            },
            federation,
            strategies,
            out,
            entries: map,
        })
    }
}
