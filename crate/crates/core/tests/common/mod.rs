//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use fedbench::data::{gen_synthetic, partition_dirichlet, partition_kfold, Dataset, Sample, SyntheticSpec};
use fedbench::federation::{AggregationWeights, ClientState, EvalMode, FederationConfig, ParamMask, RoundObserver};
use fedbench::model::{backward, forward, Activation, Mode, ModelBuilder, ModelState, Role};
use fedbench::rng::{stream, Purpose};
use fedbench::strategies::StrategyKind;
use fedbench::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 7, 7, Purpose::Init)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * normal(rng)).collect())
}

pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` around `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerCase {
    Dense,
    Conv,
    BatchNormFlat,
    BatchNormSpatial,
    Relu,
    Tanh,
    Silu,
    GlobalAvgPool,
}

pub const LAYER_CASES: [LayerCase; 8] = [
    LayerCase::Dense,
    LayerCase::Conv,
    LayerCase::BatchNormFlat,
    LayerCase::BatchNormSpatial,
    LayerCase::Relu,
    LayerCase::Tanh,
    LayerCase::Silu,
    LayerCase::GlobalAvgPool,
];

/// The layer under test followed by a dense head, with a matching input batch.
pub fn layer_instance(case: LayerCase, rng: &mut ChaCha8Rng) -> (ModelState, Tensor) {
    let batch = 3;
    let (builder, shape) = match case {
        LayerCase::Dense => (ModelBuilder::new(vec![4]).dense("layer", 3), vec![4]),
        LayerCase::Conv => (ModelBuilder::new(vec![2, 4, 4]).conv("layer", 2, 3), vec![2, 4, 4]),
        LayerCase::BatchNormFlat => (ModelBuilder::new(vec![3]).batch_norm("layer"), vec![3]),
        LayerCase::BatchNormSpatial => (ModelBuilder::new(vec![2, 3, 3]).batch_norm("layer"), vec![2, 3, 3]),
        LayerCase::Relu => (ModelBuilder::new(vec![5]).activation("layer", Activation::Relu), vec![5]),
        LayerCase::Tanh => (ModelBuilder::new(vec![5]).activation("layer", Activation::Tanh), vec![5]),
        LayerCase::Silu => (ModelBuilder::new(vec![5]).activation("layer", Activation::Silu), vec![5]),
        LayerCase::GlobalAvgPool => (ModelBuilder::new(vec![2, 3, 3]).global_avg_pool("layer"), vec![2, 3, 3]),
    };
    let mut model = builder.representation().dense("head", 2).build(rng).unwrap();
    // Random affine parameters so batch norm is not at its identity point.
    for (_, p) in model.params_mut() {
        if p.role == Role::Trainable {
            for v in &mut p.values {
                *v += 0.3 * normal(rng);
            }
        }
    }
    let mut full = vec![batch];
    full.extend(shape);
    let mut x = random_tensor(rng, full, 1.0);
    if matches!(case, LayerCase::Relu) {
        // Keep inputs away from the kink where the derivative is undefined.
        for v in &mut x.data {
            if v.abs() < 0.05 {
                *v += 0.1_f64.copysign(*v);
            }
        }
    }
    (model, x)
}

fn trainable_values(model: &ModelState) -> Vec<(String, Vec<f64>)> {
    model.trainable().map(|p| (p.name.clone(), p.values.clone())).collect()
}

/// Largest relative error between backward and central differences of
/// `sum(g * logits)` in training mode, over every trainable tensor and the
/// input.
pub fn layer_gradient_error(model: &ModelState, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let mut m = model.clone();
    let trace = forward(&mut m, x, Mode::Train).unwrap();
    let g = random_tensor(rng, trace.logits.shape.clone(), 1.0);
    let grads = backward(&m, &trace, &g).unwrap();
    let objective = |model: &ModelState, x: &Tensor| -> f64 {
        let mut m = model.clone();
        let out = forward(&mut m, x, Mode::Train).unwrap().logits;
        out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0_f64;
    for (name, values) in trainable_values(model) {
        let numeric = numeric_gradient(&values, |v| {
            let mut probe = model.clone();
            probe.param_mut(&name).unwrap().values.copy_from_slice(v);
            objective(&probe, x)
        });
        worst = worst.max(rel_err(grads.get(&name).unwrap(), &numeric));
    }
    let numeric = numeric_gradient(&x.data, |v| objective(model, &Tensor::new(x.shape.clone(), v.to_vec())));
    worst.max(rel_err(&grads.input.data, &numeric))
}

/// Plain weighted mean per masked tensor, summed in client order; tensors
/// outside the mask come from the first model.
pub fn brute_force_aggregate(models: &[ModelState], p: &[f64], mask: &ParamMask) -> ModelState {
    let mut out = models[0].clone();
    let names: Vec<(String, Role, bool)> = models[0]
        .params()
        .map(|(layer, param)| (param.name.clone(), param.role, mask.includes(layer.kind(), param.role)))
        .collect();
    for (name, _, included) in names {
        if !included {
            continue;
        }
        let len = out.param(&name).unwrap().values.len();
        let mut acc = vec![0.0; len];
        for (m, w) in models.iter().zip(p) {
            for (a, v) in acc.iter_mut().zip(&m.param(&name).unwrap().values) {
                *a += w * v;
            }
        }
        out.param_mut(&name).unwrap().values = acc;
    }
    out
}

/// Random perturbation of every parameter, keeping batch-norm variances
/// positive and counters integral.
pub fn jitter(model: &ModelState, r: &mut ChaCha8Rng) -> ModelState {
    let mut m = model.clone();
    for (_, p) in m.params_mut() {
        match p.role {
            Role::BnCounter => p.values[0] = r.random_range(0..50) as f64,
            Role::BnStatistic => p.values.iter_mut().for_each(|v| *v = v.abs() + r.random_range(0.1..2.0)),
            Role::Trainable => p.values.iter_mut().for_each(|v| *v += normal(r)),
        }
    }
    m
}

/// Scalars a strategy transmits over `e` rounds with `k` clients, for a
/// model of `p` scalars of which `p_bn` are batch-norm and with `layers`
/// trainable layers.
pub fn closed_form_scalars(kind: StrategyKind, p: u64, p_bn: u64, layers: u64, e: u64, k: u64) -> u64 {
    match kind {
        StrategyKind::FedAvg | StrategyKind::Prr | StrategyKind::Ours => 2 * p * e * k,
        StrategyKind::FedProx | StrategyKind::Moon | StrategyKind::FedRs => 2 * p * e * k + k,
        StrategyKind::FedNova => 2 * p * e * k + k + e * k,
        StrategyKind::Elastic => 2 * p * e * k + k + layers * e * k,
        StrategyKind::FedBn => 2 * (p - p_bn) * e * k,
        StrategyKind::Dense => p * k,
    }
}

/// Checks each round that clients keep their own batch-norm tensors bitwise
/// through aggregation and receive the brute-force weighted mean of the rest.
pub struct FedBnCheck {
    pub sizes: Vec<usize>,
    uploads: Vec<ModelState>,
    global: Option<ModelState>,
    pub rounds_checked: usize,
    pub worst_shared_error: f64,
}

impl FedBnCheck {
    pub fn new(sizes: Vec<usize>) -> Self {
        FedBnCheck {
            sizes,
            uploads: Vec::new(),
            global: None,
            rounds_checked: 0,
            worst_shared_error: 0.0,
        }
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

impl RoundObserver for FedBnCheck {
    fn after_download(&mut self, _round: usize, clients: &[ClientState]) {
        let Some(global) = &self.global else { return };
        let mask = ParamMask::without_bn();
        for (c, up) in clients.iter().zip(&self.uploads) {
            let layers = c.model.layers().iter().zip(up.layers()).zip(global.layers());
            for ((layer, before), g) in layers {
                for ((p, b), q) in layer.params.iter().zip(&before.params).zip(&g.params) {
                    if mask.includes(layer.kind(), p.role) {
                        assert_eq!(bits(&p.values), bits(&q.values), "{} not received", p.name);
                    } else {
                        assert_eq!(bits(&p.values), bits(&b.values), "{} changed by aggregation", p.name);
                    }
                }
            }
        }
        self.rounds_checked += 1;
    }

    fn after_local(&mut self, _round: usize, clients: &[ClientState]) {
        self.uploads = clients.iter().map(|c| c.model.clone()).collect();
    }

    fn after_aggregate(&mut self, _round: usize, global: &ModelState) {
        let w = AggregationWeights::from_counts(&self.sizes).unwrap();
        let mask = ParamMask::without_bn();
        let want = brute_force_aggregate(&self.uploads, w.as_slice(), &mask);
        for (layer, e) in global.layers().iter().zip(want.layers()) {
            for (p, q) in layer.params.iter().zip(&e.params) {
                if !mask.includes(layer.kind(), p.role) {
                    continue;
                }
                for (a, b) in p.values.iter().zip(&q.values) {
                    let err = (a - b).abs() / b.abs().max(1.0);
                    self.worst_shared_error = self.worst_shared_error.max(err);
                }
            }
        }
        assert!(self.worst_shared_error <= 1e-12, "shared error {}", self.worst_shared_error);
        self.global = Some(global.clone());
    }
}

pub fn weights(p: &[f64]) -> AggregationWeights {
    AggregationWeights::new(p.to_vec()).unwrap()
}

/// Easy 2-class images split into three k-fold clients and a test fold.
pub fn two_class_fixture(seed: u64) -> (Vec<Dataset>, Dataset) {
    let spec = SyntheticSpec {
        classes: 2,
        samples_per_class: 120,
        shape: vec![1, 8, 8],
        class_signal: 0.5,
        noise_level: 0.5,
    };
    let ds = gen_synthetic(&spec, seed).unwrap();
    let split = partition_kfold(&ds, 4, 0, seed).unwrap();
    (split.clients, split.test)
}

pub fn small_federation(clients: usize, rounds: usize, seed: u64) -> FederationConfig {
    let mut fed = FederationConfig::new(clients, rounds, seed);
    fed.local_epochs = 2;
    fed.batch_size = 32;
    fed.eval_mode = EvalMode::Both;
    fed
}

/// Two classes whose 2-pixel images are Gaussian around `-0.5` and `+0.5`.
pub fn gaussian_mixture(seed: u64, per_class: usize, sigma: f64) -> Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        let mean = if label == 0 { -0.5 } else { 0.5 };
        let image = (0..2).map(|_| (mean + sigma * normal(&mut r)).clamp(-1.0, 1.0) as f32).collect();
        samples.push(Sample::real(image, label));
    }
    Dataset::new(2, vec![1, 1, 2], samples).unwrap()
}

/// Label-skewed benchmark: five Dirichlet(0.5) clients over a noisy
/// four-class pool, with a held-out test fold.
pub fn noniid_benchmark(seed: u64) -> (Vec<Dataset>, Dataset) {
    let spec = SyntheticSpec {
        classes: 4,
        samples_per_class: 150,
        shape: vec![1, 8, 8],
        class_signal: 0.5,
        noise_level: 1.0,
    };
    let ds = gen_synthetic(&spec, seed).unwrap();
    let split = partition_kfold(&ds, 6, 0, seed).unwrap();
    let pool = Dataset::concat(&split.clients).unwrap();
    (partition_dirichlet(&pool, 5, 0.5, seed).unwrap(), split.test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossCase {
    CrossEntropy,
    RestrictedCrossEntropy,
    Proximal,
    Contrastive,
    Distillation,
    NoiseMse,
    GeneratorDiversity,
    /// Cross-entropy, proximal and contrastive terms through a whole model.
    CombinedObjective,
}

pub const LOSS_CASES: [LossCase; 8] = [
    LossCase::CrossEntropy,
    LossCase::RestrictedCrossEntropy,
    LossCase::Proximal,
    LossCase::Contrastive,
    LossCase::Distillation,
    LossCase::NoiseMse,
    LossCase::GeneratorDiversity,
    LossCase::CombinedObjective,
];

fn tensor_check(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let numeric = numeric_gradient(&x.data, |v| f(&Tensor::new(x.shape.clone(), v.to_vec())));
    rel_err(&analytic.data, &numeric)
}

/// Largest relative error between a loss term's analytic gradient and
/// central differences on one random instance.
pub fn loss_gradient_error(case: LossCase, rng: &mut ChaCha8Rng) -> f64 {
    use fedbench::model::loss::{contrastive, cross_entropy_soft, distillation, mse, prox_term, restricted_cross_entropy};
    use fedbench::strategies::{diversity, Contrast, LocalObjective};

    let (b, k) = (4, 3);
    let logits = random_tensor(rng, vec![b, k], 1.5);
    let targets: Vec<Vec<f64>> = (0..b).map(|_| random_distribution(rng, k)).collect();
    match case {
        LossCase::CrossEntropy => {
            let (_, g) = cross_entropy_soft(&logits, &targets).unwrap();
            tensor_check(&logits, &g, |l| cross_entropy_soft(l, &targets).unwrap().0)
        }
        LossCase::RestrictedCrossEntropy => {
            let mut present: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
            present[rng.random_range(0..k)] = true;
            let alpha = rng.random_range(0.05..1.0);
            let (_, g) = restricted_cross_entropy(&logits, &targets, &present, alpha).unwrap();
            tensor_check(&logits, &g, |l| restricted_cross_entropy(l, &targets, &present, alpha).unwrap().0)
        }
        LossCase::Proximal => {
            let (model, _) = layer_instance(LayerCase::BatchNormFlat, rng);
            let mut anchor = model.clone();
            for (_, p) in anchor.params_mut() {
                for v in &mut p.values {
                    *v += normal(rng);
                }
            }
            let mu = rng.random_range(0.001..2.0);
            let (_, grads) = prox_term(&model, &anchor, mu).unwrap();
            let mut worst = 0.0_f64;
            for (name, values) in trainable_values(&model) {
                let numeric = numeric_gradient(&values, |v| {
                    let mut probe = model.clone();
                    probe.param_mut(&name).unwrap().values.copy_from_slice(v);
                    prox_term(&probe, &anchor, mu).unwrap().0
                });
                worst = worst.max(rel_err(grads.get(&name).unwrap(), &numeric));
            }
            worst
        }
        LossCase::Contrastive => {
            let d = 5;
            let z = random_tensor(rng, vec![b, d], 1.0);
            let zg = random_tensor(rng, vec![b, d], 1.0);
            let zp = random_tensor(rng, vec![b, d], 1.0);
            let tau = rng.random_range(0.2..2.0);
            let mu = rng.random_range(0.1..2.0);
            let (_, g) = contrastive(&z, &zg, &zp, tau, mu).unwrap();
            tensor_check(&z, &g, |z| contrastive(z, &zg, &zp, tau, mu).unwrap().0)
        }
        LossCase::Distillation => {
            let teacher = random_tensor(rng, vec![b, k], 1.5);
            let t = rng.random_range(0.5..4.0);
            let (_, g) = distillation(&logits, &teacher, t).unwrap();
            tensor_check(&logits, &g, |s| distillation(s, &teacher, t).unwrap().0)
        }
        LossCase::NoiseMse => {
            let target = random_tensor(rng, vec![b, 6], 1.0);
            let pred = random_tensor(rng, vec![b, 6], 1.0);
            let (_, g) = mse(&pred, &target).unwrap();
            tensor_check(&pred, &g, |p| mse(p, &target).unwrap().0)
        }
        LossCase::GeneratorDiversity => {
            let x = random_tensor(rng, vec![b, 6], 1.0);
            let (_, g) = diversity(&x);
            tensor_check(&x, &g, |x| diversity(x).0)
        }
        LossCase::CombinedObjective => {
            let model = ModelBuilder::new(vec![4])
                .dense("fc", 5)
                .batch_norm("bn")
                .activation("act", Activation::Tanh)
                .representation()
                .dense("head", k)
                .build(rng)
                .unwrap();
            let x = random_tensor(rng, vec![b, 4], 1.0);
            let mut anchor = model.clone();
            for (_, p) in anchor.params_mut() {
                for v in &mut p.values {
                    *v += 0.2 * normal(rng);
                }
            }
            let zg = random_tensor(rng, vec![b, 5], 1.0);
            let zp = random_tensor(rng, vec![b, 5], 1.0);
            let present = [true, false, true];
            let objective = LocalObjective {
                restrict: Some((&present, 0.5)),
                prox: Some((&anchor, 0.3)),
                contrast: Some(Contrast {
                    z_glob: &zg,
                    z_prev: &zp,
                    tau: 0.5,
                    mu: 1.0,
                }),
            };
            let (_, grads) = objective.evaluate(&mut model.clone(), &x, &targets).unwrap();
            let mut worst = 0.0_f64;
            for (name, values) in trainable_values(&model) {
                let numeric = numeric_gradient(&values, |v| {
                    let mut probe = model.clone();
                    probe.param_mut(&name).unwrap().values.copy_from_slice(v);
                    objective.evaluate(&mut probe, &x, &targets).unwrap().0
                });
                worst = worst.max(rel_err(grads.get(&name).unwrap(), &numeric));
            }
            worst
        }
    }
}
