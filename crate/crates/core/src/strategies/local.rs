use crate::error::Result;
use crate::model::loss::{contrastive, cross_entropy_soft, prox_term, restricted_cross_entropy};
use crate::model::{backward_with_representation, forward, Gradients, Mode, ModelState};
use crate::tensor::Tensor;

/// Representations the contrastive term compares against.
#[derive(Clone, Copy, Debug)]
pub struct Contrast<'a> {
    pub z_glob: &'a Tensor,
    pub z_prev: &'a Tensor,
    pub tau: f64,
    pub mu: f64,
}

/// A client's training loss: cross-entropy (optionally over restricted
/// softmax) plus optional proximal and contrastive terms. Terms whose weight
/// is zero are skipped entirely.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalObjective<'a> {
    /// Class-presence mask and scaling for missing classes.
    pub restrict: Option<(&'a [bool], f64)>,
    /// Anchor model and weight.
    pub prox: Option<(&'a ModelState, f64)>,
    pub contrast: Option<Contrast<'a>>,
}

impl LocalObjective<'_> {
    /// Loss and trainable-parameter gradients on one batch. Runs the model in
    /// training mode, so batch-norm statistics move.
    pub fn evaluate(&self, model: &mut ModelState, x: &Tensor, targets: &[Vec<f64>]) -> Result<(f64, Gradients)> {
        let trace = forward(model, x, Mode::Train)?;
        let (mut loss, logits_grad) = match self.restrict {
            Some((present, alpha)) => restricted_cross_entropy(&trace.logits, targets, present, alpha)?,
            None => cross_entropy_soft(&trace.logits, targets)?,
        };
        let mut rep_grad = None;
        if let Some(c) = self.contrast.filter(|c| c.mu != 0.0) {
            let (l, g) = contrastive(&trace.representation, c.z_glob, c.z_prev, c.tau, c.mu)?;
            loss += l;
            rep_grad = Some(g);
        }
        let mut grads = backward_with_representation(model, &trace, &logits_grad, rep_grad.as_ref())?;
        if let Some((anchor, mu)) = self.prox.filter(|(_, mu)| *mu != 0.0) {
            let (l, g) = prox_term(model, anchor, mu)?;
            loss += l;
            grads.add_scaled(&g, 1.0)?;
        }
        Ok((loss, grads))
    }
}
