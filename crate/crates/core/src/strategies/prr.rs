use serde::{Deserialize, Serialize};

use super::supervised::train_flops;
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    epoch_batches, evaluate_global, ClientState, LocalContext, LocalOutcome, Phase,
    PrepareContext, PrepareOutcome,
};
use crate::model::flops::forward_flops;
use crate::model::loss::{cross_entropy_soft, distillation};
use crate::model::{adam_step, backward, forward, AdamState, Mode, ModelState};
use crate::rng::Purpose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrrParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub kd_temperature: f64,
}

impl Default for PrrParams {
    fn default() -> Self {
        PrrParams {
            alpha1: 0.7,
            alpha2: 0.9,
            kd_temperature: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrrPhase {
    /// Both models learn from labels only.
    Recover,
    /// Each model also distills from the other.
    Exchange,
    /// Only the personalized model distills from the deputy.
    Sublimate,
}

/// Phase for a deputy/personalized training-accuracy ratio.
pub fn select_phase(ratio: f64, alpha1: f64, alpha2: f64) -> PrrPhase {
    if ratio < alpha1 {
        PrrPhase::Recover
    } else if ratio < alpha2 {
        PrrPhase::Exchange
    } else {
        PrrPhase::Sublimate
    }
}

/// Every client keeps a personalized model the server never touches and a
/// deputy that carries the aggregate; the two teach each other according to
/// how well the deputy does on local data.
pub struct Prr {
    params: PrrParams,
}

impl Prr {
    pub fn new(params: PrrParams) -> Self {
        Prr { params }
    }
}

fn kd_into(grad: &mut Tensor, student: &Tensor, teacher: &Tensor, t: f64) -> Result<f64> {
    let (l, g) = distillation(student, teacher, t)?;
    for (a, b) in grad.data.iter_mut().zip(&g.data) {
        *a += b;
    }
    Ok(l)
}

impl Strategy for Prr {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Prr
    }

    fn personalized(&self) -> bool {
        true
    }

    fn prepare(&mut self, _ctx: &PrepareContext, _clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        Ok(PrepareOutcome {
            deviations: vec![
                "PRR phases are chosen by the deputy/personalized training-accuracy ratio against alpha1 and alpha2".into(),
                "PRR weighs cross-entropy and distillation terms 1:1".into(),
            ],
            ..Default::default()
        })
    }

    fn init_client(&self, state: &mut ClientState) {
        state.personal = Some(state.model.clone());
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let personal = state
            .personal
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("client has no personalized model".into()))?;
        let deputy = &mut state.model;
        let t = self.params.kd_temperature;
        let hyper = &ctx.fed.optimizer;
        let (mut adam_d, mut adam_p) = (AdamState::new(), AdamState::new());
        let mut rng = ctx.rng(Purpose::Shuffle);
        let (mut samples, mut eval_flops, mut steps) = (0usize, 0u64, 0u64);
        for _ in 0..ctx.fed.local_epochs {
            let a_d = evaluate_global(deputy, data)?;
            let a_p = evaluate_global(personal, data)?;
            eval_flops += 2 * forward_flops(deputy, data.len());
            let phase = select_phase(a_d / a_p.max(1e-12), self.params.alpha1, self.params.alpha2);
            for idx in epoch_batches(&mut rng, data.len(), ctx.fed.batch_size) {
                let (x, y) = data.batch(&idx);
                let td = forward(deputy, &x, Mode::Train)?;
                let tp = forward(personal, &x, Mode::Train)?;
                let (mut ld, mut gd) = cross_entropy_soft(&td.logits, &y)?;
                let (mut lp, mut gp) = cross_entropy_soft(&tp.logits, &y)?;
                if phase == PrrPhase::Exchange {
                    ld += kd_into(&mut gd, &td.logits, &tp.logits, t)?;
                }
                if phase != PrrPhase::Recover {
                    lp += kd_into(&mut gp, &tp.logits, &td.logits, t)?;
                }
                if !ld.is_finite() || !lp.is_finite() {
                    return Err(Error::NonFinite(format!("PRR loss at optimizer step {steps}")));
                }
                let grads_d = backward(deputy, &td, &gd)?;
                let grads_p = backward(personal, &tp, &gp)?;
                adam_step(deputy, &grads_d, &mut adam_d, hyper)?;
                adam_step(personal, &grads_p, &mut adam_p, hyper)?;
                samples += idx.len();
                steps += 1;
            }
        }
        state.steps = steps;
        Ok(LocalOutcome {
            flops: vec![
                (Phase::Train, train_flops(&state.model, samples, 2)),
                (Phase::Eval, eval_flops),
            ],
        })
    }

    fn personal_model<'a>(&self, state: &'a ClientState) -> &'a ModelState {
        state.personal.as_ref().unwrap_or(&state.model)
    }
}
