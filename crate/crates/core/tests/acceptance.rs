//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 7`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    brute_force_aggregate, closed_form_scalars, gaussian_mixture, jitter, layer_gradient_error, layer_instance,
    loss_gradient_error, noniid_benchmark, normal, rng, small_federation, two_class_fixture, FedBnCheck, LayerCase,
    LAYER_CASES, LOSS_CASES,
};
use fedbench::bench::{cmd_run, ExperimentConfig};
use fedbench::data::{apply_feature_shift, cross_client_std, gen_synthetic, Dataset, ShiftSpec, SyntheticSpec};
use fedbench::diffusion::{
    augment_partition, ddpm_epochs, forward_noise_closed, forward_noise_step, sample, smooth_labels, train_ddpm,
    DdpmSettings,
};
use fedbench::federation::{
    aggregate_weighted, run_federation, run_federation_with, simulate_ledger, AggregationWeights, FederationConfig,
    ParamMask, Phase, RunInputs, RunOutcome,
};
use fedbench::model::{Footprint, ModelState};
use fedbench::strategies::{
    DenseParams, FedProxParams, FedRsParams, MoonParams, OursParams, StrategyConfig, StrategyKind,
};
use fedbench::tensor::Tensor;
use rand::Rng;

fn run(config: &StrategyConfig, clients: &[Dataset], test: &Dataset, fed: &FederationConfig) -> RunOutcome {
    run_federation(fed, config, clients.to_vec(), test).unwrap()
}

fn accuracies(out: &RunOutcome) -> Vec<(Option<f64>, Option<f64>)> {
    out.report.records.iter().map(|r| (r.global_acc, r.pers_acc)).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0))
}

fn flat(m: &ModelState) -> Vec<f64> {
    m.params().flat_map(|(_, p)| p.values.clone()).collect()
}

fn communication_accounting() -> String {
    let fp = Footprint {
        total: 24_088_000,
        bn: 93_500,
        trainable_layers: 163,
    };
    let mut cells = 0;
    for kind in StrategyKind::ALL {
        for e in [1u64, 2, 3, 5] {
            for k in [1u64, 2, 3, 5] {
                let ledger = simulate_ledger(&StrategyConfig::default_for(kind), &fp, e as usize, k as usize).unwrap();
                let want = closed_form_scalars(kind, fp.total, fp.bn, fp.trainable_layers, e, k);
                assert_eq!(ledger.totals().transmitted(), want, "{kind} E={e} K={k}");
                assert_eq!(ledger.totals().bytes(), 4 * want, "{kind} E={e} K={k}");
                cells += 1;
            }
        }
    }
    let sci = |v: u64| format!("{:.3e}", v as f64);
    let avg = simulate_ledger(&StrategyConfig::FedAvg, &fp, 1, 1).unwrap();
    assert_eq!(sci(avg.totals().transmitted()), "4.818e7");
    let model_bytes: Vec<u64> = avg.comm_events().iter().map(|e| 4 * e.param_count).collect();
    assert!(model_bytes.iter().all(|b| sci(*b) == "9.635e7"), "{model_bytes:?}");
    let bn = simulate_ledger(&StrategyConfig::FedBn, &fp, 1, 1).unwrap();
    assert!(bn.comm_events().iter().all(|e| sci(e.param_count) == "2.399e7"));
    format!("{cells} strategy/E/K cells exact; FedAvg 2P = {}, 4P = {}", sci(2 * fp.total), sci(4 * fp.total))
}

fn flop_ratios() -> String {
    let (clients, test) = two_class_fixture(7);
    let mut fed = FederationConfig::new(3, 1, 7);
    fed.local_epochs = 1;
    fed.batch_size = 20;
    let train = |config: &StrategyConfig| run(config, &clients, &test, &fed).ledger.flops_by_phase(Phase::Train);
    let avg = train(&StrategyConfig::FedAvg);
    let moon = train(&StrategyConfig::Moon(MoonParams::default()));
    let prr = train(&StrategyConfig::default_for(StrategyKind::Prr));
    assert_eq!(moon, 3 * avg);
    assert_eq!(prr, 2 * avg);

    let target = 80;
    let ours = train(&StrategyConfig::Ours(OursParams {
        target_count: Some(target),
        ddpm: DdpmSettings {
            hidden: 16,
            epoch_cap: 1,
            ..Default::default()
        },
        ..Default::default()
    }));
    let steps = |n: usize| n.div_ceil(fed.batch_size) as u64;
    assert!(clients.iter().all(|c| c.len() % fed.batch_size == 0));
    let avg_steps: u64 = clients.iter().map(|c| steps(c.len())).sum();
    let ours_steps = clients.len() as u64 * steps(target);
    assert_eq!(ours * avg_steps, avg * ours_steps);
    format!(
        "MOON/FedAvg = {}, PRR/FedAvg = {}, Ours/FedAvg per step = {}",
        moon as f64 / avg as f64,
        prr as f64 / avg as f64,
        (ours as f64 / ours_steps as f64) / (avg as f64 / avg_steps as f64)
    )
}

fn aggregation_oracle() -> String {
    let mut r = rng(4242);
    let mut worst: f64 = 0.0;
    let cases = [LayerCase::BatchNormFlat, LayerCase::Conv, LayerCase::BatchNormSpatial, LayerCase::Dense];
    for i in 0..1000 {
        let (base, _) = layer_instance(cases[i % cases.len()], &mut r);
        let k = r.random_range(1..8);
        let models: Vec<ModelState> = (0..k).map(|_| jitter(&base, &mut r)).collect();
        let counts: Vec<usize> = (0..k).map(|_| r.random_range(1..1000)).collect();
        let w = AggregationWeights::from_counts(&counts).unwrap();
        for mask in [ParamMask::shared(), ParamMask::without_bn()] {
            let got = aggregate_weighted(&models, &w, &mask).unwrap();
            let want = brute_force_aggregate(&models, w.as_slice(), &mask);
            for (g, e) in flat(&got).iter().zip(flat(&want)) {
                let err = (g - e).abs() / e.abs().max(1.0);
                assert!(err <= 1e-12, "instance {i}: {g} vs {e}");
                worst = worst.max(err);
            }
        }
    }
    format!("1000 instances x 2 masks, worst scaled error {worst:.1e}")
}

fn disabling_equivalence() -> String {
    let variants = [
        ("FedProx mu=0", StrategyConfig::FedProx(FedProxParams { mu: 0.0 })),
        ("MOON mu=0", StrategyConfig::Moon(MoonParams { mu: 0.0, tau: 0.5 })),
        ("FedRS alpha=1", StrategyConfig::FedRs(FedRsParams { alpha: 1.0 })),
        (
            "Ours without augmentation",
            StrategyConfig::Ours(OursParams {
                augment: false,
                ..Default::default()
            }),
        ),
    ];
    for seed in 0..3 {
        let (clients, test) = two_class_fixture(seed);
        let fed = small_federation(3, 10, seed);
        let avg = run(&StrategyConfig::FedAvg, &clients, &test, &fed);
        for (name, config) in &variants {
            let out = run(config, &clients, &test, &fed);
            assert!(out.global == avg.global, "{name} seed {seed}: global model differs");
            assert!(accuracies(&out) == accuracies(&avg), "{name} seed {seed}: accuracies differ");
            assert!(out.drift == avg.drift, "{name} seed {seed}: drift differs");
            for (a, b) in out.clients.iter().zip(&avg.clients) {
                assert!(a.model == b.model, "{name} seed {seed}: client {} differs", a.id);
            }
        }
    }
    "4 variants x 3 seeds x 10 rounds bit-identical to FedAvg".into()
}

fn fedbn_mask() -> String {
    let (clients, test) = two_class_fixture(5);
    let mut check = FedBnCheck::new(clients.iter().map(Dataset::len).collect());
    let inputs = RunInputs {
        clients,
        test,
        client_tests: None,
    };
    run_federation_with(&small_federation(3, 20, 5), &StrategyConfig::FedBn, inputs, &mut check).unwrap();
    assert_eq!(check.rounds_checked, 19);
    format!(
        "BN tensors bitwise local over {} aggregations; worst shared error {:.1e}",
        check.rounds_checked, check.worst_shared_error
    )
}

fn draws(seed: u64, n: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![n], (0..n).map(|_| normal(&mut r)).collect())
}

fn diffusion_correctness() -> String {
    let s = DdpmSettings::default().schedule().unwrap();
    let n = 10_000;
    let nf = n as f64;
    let x0 = Tensor::new(vec![n], vec![0.8; n]);
    let big_t = s.timesteps();
    let mut worst_z: f64 = 0.0;
    for t in [1, big_t / 2, big_t] {
        let closed = forward_noise_closed(&x0, t, &draws(10 + t as u64, n), &s).unwrap();
        let mut iterated = x0.clone();
        for step in 1..=t {
            iterated = forward_noise_step(&iterated, s.beta(step), &draws(1000 + step as u64, n)).unwrap();
        }
        let (mc, vc) = mean_var(&closed.data);
        let (mi, vi) = mean_var(&iterated.data);
        let se_mean = (vc / nf + vi / nf).sqrt();
        let se_var = (2.0 * (vc * vc + vi * vi) / (nf - 1.0)).sqrt();
        let z = ((mc - mi).abs() / se_mean).max((vc - vi).abs() / se_var);
        assert!(z < 3.0, "t={t}: mean {mc} vs {mi}, var {vc} vs {vi}");
        worst_z = worst_z.max(z);
    }
    assert_eq!(smooth_labels(&[1.0, 0.0], 0.1, 2).unwrap(), vec![0.95, 0.05]);
    assert_eq!(ddpm_epochs(2, 2000), 1000);
    assert_eq!(ddpm_epochs(9, 100_000), 90);
    format!("marginals within {worst_z:.2} SE at t = 1, {}, {big_t}; smoothing and epoch rule exact", big_t / 2)
}

fn generative_fidelity() -> String {
    let settings = DdpmSettings::default();
    let schedule = settings.schedule().unwrap();

    let data = gaussian_mixture(10, 500, 0.1);
    let (_, used) = settings.epochs_for(2, data.len());
    let (ddpm, _) = train_ddpm(&data, &schedule, &settings.train_config(used), 3).unwrap();
    let mut worst: f64 = 0.0;
    for (label, truth) in [(0, -0.5), (1, 0.5)] {
        let xs = sample(&ddpm, label, 500, 11).unwrap();
        for px in 0..2 {
            let m = xs.iter().map(|x| x[px]).sum::<f64>() / xs.len() as f64;
            worst = worst.max((m - truth).abs());
        }
    }
    assert!(worst < 0.15, "class mean off by {worst}");

    let spec = SyntheticSpec {
        classes: 2,
        samples_per_class: 300,
        shape: vec![1, 8, 8],
        class_signal: 0.5,
        noise_level: 0.5,
    };
    let pool = gen_synthetic(&spec, 3).unwrap();
    let clients = [0..100, 100..300, 300..600].map(|r| pool.subset(&r.collect::<Vec<_>>()));
    let shifts = [
        ShiftSpec {
            brightness_offset: 0.3,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            brightness_offset: -0.2,
            contrast_scale: 0.8,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            noise_sigma: 0.1,
            ..ShiftSpec::IDENTITY
        },
    ];
    let shifted = apply_feature_shift(&clients, &shifts, 3).unwrap();
    let augmented: Vec<Dataset> = shifted
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (_, used) = settings.epochs_for(2, c.len());
            let (ddpm, _) = train_ddpm(c, &schedule, &settings.train_config(used), k as u64).unwrap();
            augment_partition(c, &ddpm, 300, 0.1, k as u64).unwrap()
        })
        .collect();
    let (before, after) = (cross_client_std(&shifted).unwrap(), cross_client_std(&augmented).unwrap());
    assert!(after < before, "cross-client std {before} -> {after}");
    format!("class means within {worst:.3}; cross-client std of pixel means {before:.4} -> {after:.4}")
}

fn qualitative_orderings() -> String {
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (clients, test) = noniid_benchmark(seed);
        let fed = FederationConfig::new(clients.len(), 30, seed);
        let avg = run(&StrategyConfig::FedAvg, &clients, &test, &fed);
        let prox = run(&StrategyConfig::FedProx(FedProxParams::default()), &clients, &test, &fed);
        let (d_avg, d_prox) = (mean(&avg.drift), mean(&prox.drift));
        assert!(d_prox < d_avg, "seed {seed}: drift FedProx {d_prox} vs FedAvg {d_avg}");

        let dense = run(
            &StrategyConfig::Dense(DenseParams {
                pretrain_epochs: 50,
                ..Default::default()
            }),
            &clients,
            &test,
            &fed,
        );
        let a_avg = avg.report.final_accuracy().unwrap();
        let a_dense = dense.report.final_accuracy().unwrap();
        assert!(a_dense < a_avg, "seed {seed}: DENSE {a_dense} vs FedAvg {a_avg}");
        let p = dense.global.footprint().total;
        assert_eq!(dense.ledger.totals().transmitted(), clients.len() as u64 * p);

        let pooled = Dataset::concat(&clients).unwrap();
        let central = run(&StrategyConfig::FedAvg, &[pooled], &test, &FederationConfig::new(1, 30, seed));
        let a_central = central.report.final_accuracy().unwrap();
        assert!(a_avg >= 0.9 * a_central, "seed {seed}: FedAvg {a_avg} vs centralized {a_central}");
        lines.push(format!(
            "seed {seed}: drift {d_prox:.3}<{d_avg:.3}, DENSE {a_dense:.3}<{a_avg:.3}, central {a_central:.3}"
        ));
    }
    lines.join("; ")
}

const NONIID_CONFIG: &str = "\
seed = 11
dataset.classes = 4
dataset.samples_per_class = 60
dataset.noise_level = 1.0
partition.method = dirichlet
partition.folds = 6
partition.run_folds = 0, 1
partition.concentration = 0.5
federation.clients = 5
federation.rounds = 4
model.hidden = 16
strategies = fedavg, fedprox, moon, fednova, fedrs, elastic, fedbn, prr, dense, ours
strategy.dense.pretrain_epochs = 2
strategy.dense.generator_steps = 5
strategy.dense.distill_steps = 5
strategy.ours.ddpm.hidden = 16
strategy.ours.ddpm.epoch_cap = 3
";

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> String {
    let cfg = ExperimentConfig::from_text(NONIID_CONFIG).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let summary = cmd_run(&cfg, dir.path()).unwrap();
        assert!(summary.succeeded(), "{:?}", summary.failures);
    }
    let (first, second) = (snapshot(a.path()), snapshot(b.path()));
    assert!(!first.is_empty());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{name} differs between runs");
    }
    format!("{} files byte-identical across two runs of 10 strategies x 2 folds", first.len())
}

fn gradient_checks() -> String {
    let mut worst: f64 = 0.0;
    for (i, case) in LAYER_CASES.iter().enumerate() {
        let mut r = rng(1000 + i as u64);
        for _ in 0..100 {
            let (model, x) = layer_instance(*case, &mut r);
            let err = layer_gradient_error(&model, &x, &mut r);
            assert!(err < 1e-4, "{case:?}: {err}");
            worst = worst.max(err);
        }
    }
    for (i, case) in LOSS_CASES.iter().enumerate() {
        let mut r = rng(2000 + i as u64);
        for _ in 0..100 {
            let err = loss_gradient_error(*case, &mut r);
            assert!(err < 1e-4, "{case:?}: {err}");
            worst = worst.max(err);
        }
    }
    format!(
        "{} layer kinds and {} loss terms x 100 instances, worst relative error {worst:.1e}",
        LAYER_CASES.len(),
        LOSS_CASES.len()
    )
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> String,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        name: "communication accounting",
        budget: Duration::from_secs(1),
        check: communication_accounting,
    },
    Criterion {
        name: "FLOP ratios",
        budget: Duration::from_secs(1),
        check: flop_ratios,
    },
    Criterion {
        name: "aggregation oracle",
        budget: Duration::from_secs(10),
        check: aggregation_oracle,
    },
    Criterion {
        name: "strategy-disabling equivalence",
        budget: minutes(5),
        check: disabling_equivalence,
    },
    Criterion {
        name: "FedBN mask invariant",
        budget: minutes(2),
        check: fedbn_mask,
    },
    Criterion {
        name: "diffusion correctness",
        budget: minutes(1),
        check: diffusion_correctness,
    },
    Criterion {
        name: "generative fidelity",
        budget: minutes(10),
        check: generative_fidelity,
    },
    Criterion {
        name: "qualitative orderings",
        budget: minutes(30),
        check: qualitative_orderings,
    },
    Criterion {
        name: "determinism",
        budget: minutes(5),
        check: determinism,
    },
    Criterion {
        name: "gradient checks",
        budget: minutes(2),
        check: gradient_checks,
    },
];

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    let text = match (payload.downcast_ref::<String>(), payload.downcast_ref::<&str>()) {
        (Some(s), _) => s.clone(),
        (_, Some(s)) => s.to_string(),
        _ => "panicked".into(),
    };
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, c) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check));
        let took = start.elapsed();
        match outcome {
            Ok(detail) if took <= c.budget => println!("PASS [{n}] {}: {detail} ({took:.2?})", c.name),
            Ok(detail) => {
                failed += 1;
                println!("FAIL [{n}] {}: {detail}; over the {:?} budget ({took:.2?})", c.name, c.budget);
            }
            Err(payload) => {
                failed += 1;
                println!("FAIL [{n}] {}: {} ({took:.2?})", c.name, panic_message(payload));
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
