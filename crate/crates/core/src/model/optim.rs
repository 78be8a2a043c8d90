use serde::{Deserialize, Serialize};

use super::engine::Gradients;
use super::state::{ModelState, Role};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient (`g + weight_decay * w`) before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moment buffers, aligned with the model's trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable tensor. Batch-norm
/// statistics and counters are left untouched.
pub fn adam_step(
    model: &mut ModelState,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let names = model.trainable_names();
    if names.len() != grads.params.len()
        || names.iter().zip(&grads.params).any(|(n, g)| *n != g.name)
    {
        return Err(Error::Schema(
            "gradient names do not match trainable parameters".into(),
        ));
    }
    if state.m.is_empty() {
        state.m = grads.params.iter().map(|g| vec![0.0; g.values.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let trainable = model
        .params_mut()
        .map(|(_, p)| p)
        .filter(|p| p.role == Role::Trainable);
    for (((p, g), m), v) in trainable
        .zip(&grads.params)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.values.len() != g.values.len() {
            return Err(Error::Schema(format!("gradient `{}` has wrong length", g.name)));
        }
        for i in 0..p.values.len() {
            let grad = g.values[i] + hyper.weight_decay * p.values[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad * grad;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.values[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::engine::ParamGrad;
    use crate::model::state::ModelBuilder;
    use crate::rng::{stream, Purpose};
    use crate::tensor::Tensor;

    fn scalar_model() -> ModelState {
        let mut m = ModelBuilder::new(vec![1])
            .dense("fc", 1)
            .representation()
            .build(&mut stream(0, 0, 0, Purpose::Init))
            .unwrap();
        m.param_mut("fc.weight").unwrap().values[0] = 0.5;
        m.param_mut("fc.bias").unwrap().values[0] = 0.0;
        m
    }

    fn grads(w: f64, b: f64) -> Gradients {
        Gradients {
            params: vec![
                ParamGrad {
                    name: "fc.weight".into(),
                    values: vec![w],
                },
                ParamGrad {
                    name: "fc.bias".into(),
                    values: vec![b],
                },
            ],
            input: Tensor::zeros(vec![0]),
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut m = scalar_model();
        let before = m.clone();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut m, &grads(0.0, 0.0), &mut st, &hyper).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = scalar_model();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut m, &grads(1.0, 1.0), &mut AdamState::new(), &hyper).unwrap();
        let moved = 0.5 - m.param("fc.weight").unwrap().values[0];
        let expected = hyper.lr / (1.0 + hyper.eps);
        assert!((moved - expected).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn rejects_mismatched_schema() {
        let mut m = scalar_model();
        let mut g = grads(1.0, 1.0);
        g.params.pop();
        assert!(adam_step(&mut m, &g, &mut AdamState::new(), &AdamHyper::default()).is_err());
    }
}
