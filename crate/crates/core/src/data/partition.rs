use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::shift::{apply_feature_shift, ShiftSpec};
use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, SERVER};

const DIRICHLET_ATTEMPTS: u64 = 100;

/// How a training pool is split across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PartitionMethod {
    /// Equal folds; every non-test fold becomes one client.
    Kfold { folds: usize },
    Quantity { proportions: Vec<f64> },
    Dirichlet { clients: usize, concentration: f64 },
    /// IID split followed by a per-client appearance shift. Client sizes
    /// follow `proportions` when given and are equal otherwise.
    FeatureShift {
        shifts: Vec<ShiftSpec>,
        proportions: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub method: PartitionMethod,
    pub seed: u64,
}

impl PartitionPlan {
    /// Splits a training pool into client datasets. Returns the clients and
    /// any warnings worth recording in a run manifest.
    pub fn apply(&self, pool: &Dataset) -> Result<(Vec<Dataset>, Vec<String>)> {
        match &self.method {
            PartitionMethod::Kfold { folds } => {
                let split = equal_split(pool, *folds, self.seed)?;
                Ok((split, Vec::new()))
            }
            PartitionMethod::Quantity { proportions } => {
                let q = partition_quantity(pool, proportions, self.seed)?;
                Ok((q.clients, q.warnings))
            }
            PartitionMethod::Dirichlet {
                clients,
                concentration,
            } => Ok((
                partition_dirichlet(pool, *clients, *concentration, self.seed)?,
                Vec::new(),
            )),
            PartitionMethod::FeatureShift { shifts, proportions } => {
                let (split, warnings) = if proportions.is_empty() {
                    (equal_split(pool, shifts.len(), self.seed)?, Vec::new())
                } else {
                    let q = partition_quantity(pool, proportions, self.seed)?;
                    (q.clients, q.warnings)
                };
                Ok((apply_feature_shift(&split, shifts, self.seed)?, warnings))
            }
        }
    }
}

fn cmp_samples(a: &super::Sample, b: &super::Sample) -> Ordering {
    a.label
        .cmp(&b.label)
        .then(a.provenance.cmp(&b.provenance))
        .then_with(|| {
            a.image
                .iter()
                .zip(&b.image)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Sample indices sorted by content, so partitioning does not depend on
/// the order samples arrive in.
pub fn canonical_order(dataset: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.sort_by(|&a, &b| cmp_samples(&dataset.samples[a], &dataset.samples[b]));
    idx
}

fn fold_indices(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::config("partition.folds", "need at least two folds"));
    }
    if folds > dataset.len() {
        return Err(Error::config(
            "partition.folds",
            format!("{folds} folds exceed {} samples", dataset.len()),
        ));
    }
    let mut order = canonical_order(dataset);
    order.shuffle(&mut stream(seed, SERVER, 0, Purpose::Partition));
    let base = dataset.len() / folds;
    let extra = dataset.len() % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

fn equal_split(dataset: &Dataset, parts: usize, seed: u64) -> Result<Vec<Dataset>> {
    if parts == 1 {
        let order = canonical_order(dataset);
        return Ok(vec![dataset.subset(&order)]);
    }
    Ok(fold_indices(dataset, parts, seed)?
        .iter()
        .map(|ix| dataset.subset(ix))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFoldSplit {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

/// Splits into `folds` near-equal folds (the first `len % folds` folds get
/// one extra sample); fold `test_fold` is the test set and the others, in
/// order, are the clients.
pub fn partition_kfold(dataset: &Dataset, folds: usize, test_fold: usize, seed: u64) -> Result<KFoldSplit> {
    if test_fold >= folds {
        return Err(Error::config(
            "partition.test_fold",
            format!("test fold {test_fold} out of range for {folds} folds"),
        ));
    }
    let parts = fold_indices(dataset, folds, seed)?;
    let mut clients = Vec::with_capacity(folds - 1);
    let mut test = None;
    for (f, ix) in parts.iter().enumerate() {
        let d = dataset.subset(ix);
        if f == test_fold {
            test = Some(d);
        } else {
            clients.push(d);
        }
    }
    Ok(KFoldSplit {
        clients,
        test: test.expect("test fold in range"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantitySplit {
    pub clients: Vec<Dataset>,
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` items by `proportions`.
fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class-stratified split with client sizes proportional to `proportions`.
/// Per class, every client's count is within one of its exact share.
pub fn partition_quantity(dataset: &Dataset, proportions: &[f64], seed: u64) -> Result<QuantitySplit> {
    if proportions.is_empty() || proportions.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::config(
            "partition.proportions",
            "proportions must be positive",
        ));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "partition.proportions",
            format!("proportions sum to {sum}, not 1"),
        ));
    }
    let order = canonical_order(dataset);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); proportions.len()];
    let mut warnings = Vec::new();
    for class in 0..dataset.class_count {
        let mut members: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut stream(seed, SERVER, class as u64, Purpose::Partition));
        let counts = apportion(members.len(), proportions);
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                warnings.push(format!("client {k} receives no samples of class {class}"));
            }
            parts[k].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    Ok(QuantitySplit {
        clients: parts.iter().map(|ix| dataset.subset(ix)).collect(),
        warnings,
    })
}

fn dirichlet_draw<R: Rng>(rng: &mut R, clients: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        // every gamma draw underflowed; the limit puts all mass on one client
        let mut p = vec![0.0; clients];
        p[rng.random_range(0..clients)] = 1.0;
        p
    }
}

/// Label-skew split: each class is divided across clients by an independent
/// Dirichlet(concentration) draw. The whole draw is repeated (up to 100
/// attempts) while any client would end up empty.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, concentration: f64, seed: u64) -> Result<Vec<Dataset>> {
    if clients < 2 {
        return Err(Error::config("federation.clients", "need at least two clients"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::config(
            "partition.concentration",
            "concentration must be positive and finite",
        ));
    }
    if dataset.len() < clients {
        return Err(Error::config(
            "federation.clients",
            format!("{clients} clients but only {} samples", dataset.len()),
        ));
    }
    let order = canonical_order(dataset);
    let by_class: Vec<Vec<usize>> = (0..dataset.class_count)
        .map(|c| {
            order
                .iter()
                .copied()
                .filter(|&i| dataset.samples[i].label == c)
                .collect()
        })
        .collect();
    for attempt in 0..DIRICHLET_ATTEMPTS {
        let mut rng = stream(seed, SERVER, attempt, Purpose::Partition);
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = dirichlet_draw(&mut rng, clients, concentration);
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, pk) in p.iter().enumerate() {
                cum += pk;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                parts[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts.iter().map(|ix| dataset.subset(ix)).collect());
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not give every client a sample after {DIRICHLET_ATTEMPTS} Dirichlet draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic, SyntheticSpec};

    fn ds(per_class: usize) -> Dataset {
        gen_synthetic(
            &SyntheticSpec {
                classes: 2,
                samples_per_class: per_class,
                shape: vec![1, 2, 2],
                class_signal: 0.5,
                noise_level: 0.3,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn kfold_sizes() {
        let split = partition_kfold(&ds(30), 6, 0, 1).unwrap();
        assert_eq!(split.clients.len(), 5);
        assert!(split.clients.iter().all(|c| c.len() == 10));
        assert_eq!(split.test.len(), 10);
    }

    #[test]
    fn kfold_remainder_goes_to_first_folds() {
        let d = ds(7); // 14 samples, 4 folds -> 4,4,3,3
        let sizes: Vec<usize> = (0..4)
            .map(|f| partition_kfold(&d, 4, f, 2).unwrap().test.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 3, 3]);
    }

    #[test]
    fn kfold_errors() {
        assert!(partition_kfold(&ds(2), 5, 0, 0).is_err());
        assert!(partition_kfold(&ds(10), 1, 0, 0).is_err());
        assert!(partition_kfold(&ds(10), 3, 3, 0).is_err());
    }

    #[test]
    fn quantity_exact_arithmetic() {
        let q = partition_quantity(&ds(50), &[0.6, 0.3, 0.1], 3).unwrap();
        let sizes: Vec<usize> = q.clients.iter().map(Dataset::len).collect();
        assert_eq!(sizes, vec![60, 30, 10]);
        assert!(q.warnings.is_empty());
    }

    #[test]
    fn quantity_equal_thirds() {
        let q = partition_quantity(&ds(50), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 3).unwrap();
        let sizes: Vec<usize> = q.clients.iter().map(Dataset::len).collect();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        assert!(spread <= 2, "{sizes:?}");
    }

    #[test]
    fn quantity_warns_on_empty_class_share() {
        let q = partition_quantity(&ds(3), &[0.9, 0.1], 3).unwrap();
        assert!(!q.warnings.is_empty());
    }

    #[test]
    fn quantity_rejects_bad_proportions() {
        assert!(partition_quantity(&ds(5), &[0.5, 0.4], 0).is_err());
        assert!(partition_quantity(&ds(5), &[1.5, -0.5], 0).is_err());
    }

    #[test]
    fn dirichlet_nonempty_clients() {
        for seed in 0..5 {
            let parts = partition_dirichlet(&ds(20), 5, 0.1, seed).unwrap();
            assert!(parts.iter().all(|p| !p.is_empty()));
            assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 40);
        }
    }
}
