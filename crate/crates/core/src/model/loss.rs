//! Loss terms used by the federated strategies. Each returns the batch-mean
//! value together with the gradient needed for backpropagation.

use super::engine::{Gradients, ParamGrad};
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_targets(logits: &Tensor, targets: &[Vec<f64>]) -> Result<()> {
    let k = logits.item_len();
    if targets.len() != logits.batch() || targets.iter().any(|t| t.len() != k) {
        return Err(Error::Shape {
            layer: "labels".into(),
            expected: logits.shape.clone(),
            found: vec![targets.len(), targets.first().map_or(0, Vec::len)],
        });
    }
    Ok(())
}

/// Mean cross-entropy between probability-vector labels and `softmax(logits)`.
pub fn cross_entropy_soft(logits: &Tensor, targets: &[Vec<f64>]) -> Result<(f64, Tensor)> {
    check_targets(logits, targets)?;
    let b = logits.batch() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape.clone());
    for (i, y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let logp = log_softmax(row);
        let p = softmax(row);
        let mass: f64 = y.iter().sum();
        for (j, &yj) in y.iter().enumerate() {
            if yj > 0.0 {
                loss -= yj * logp[j];
            }
        }
        for (g, (pj, yj)) in grad.row_mut(i).iter_mut().zip(p.iter().zip(y)) {
            *g = (pj * mass - yj) / b;
        }
    }
    Ok((loss / b, grad))
}

fn presence_scale(present: &[bool], alpha: f64) -> Vec<f64> {
    present
        .iter()
        .map(|&p| if p { 1.0 } else { alpha })
        .collect()
}

fn check_restriction(len: usize, present: &[bool], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if present.len() != len {
        return Err(Error::Shape {
            layer: "class_present".into(),
            expected: vec![len],
            found: vec![present.len()],
        });
    }
    if !present.iter().any(|p| *p) {
        return Err(Error::InvalidArgument(
            "client has no classes present; it must not train".into(),
        ));
    }
    Ok(())
}

/// Softmax with per-class scaling: `s_i = 1` for present classes, `alpha` otherwise.
pub fn restricted_softmax(logits: &[f64], present: &[bool], alpha: f64) -> Result<Vec<f64>> {
    check_restriction(logits.len(), present, alpha)?;
    let scale = presence_scale(present, alpha);
    let max = logits
        .iter()
        .zip(&scale)
        .filter(|(_, s)| **s > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let weighted: Vec<f64> = logits
        .iter()
        .zip(&scale)
        .map(|(l, s)| s * (l - max).exp())
        .collect();
    let sum: f64 = weighted.iter().sum();
    Ok(weighted.into_iter().map(|w| w / sum).collect())
}

/// Cross-entropy over restricted-softmax probabilities.
///
/// Equivalent to ordinary softmax cross-entropy on logits shifted by
/// `ln s_i`; when no class is scaled the computation is exactly
/// [`cross_entropy_soft`].
pub fn restricted_cross_entropy(
    logits: &Tensor,
    targets: &[Vec<f64>],
    present: &[bool],
    alpha: f64,
) -> Result<(f64, Tensor)> {
    check_restriction(logits.item_len(), present, alpha)?;
    if alpha == 1.0 || present.iter().all(|p| *p) {
        return cross_entropy_soft(logits, targets);
    }
    check_targets(logits, targets)?;
    let b = logits.batch() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape.clone());
    for (i, y) in targets.iter().enumerate() {
        let p = restricted_softmax(logits.row(i), present, alpha)?;
        let mass: f64 = y.iter().sum();
        for (j, &yj) in y.iter().enumerate() {
            if yj > 0.0 {
                if p[j] == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "label mass on class {j} which the restriction excludes"
                    )));
                }
                loss -= yj * p[j].ln();
            }
        }
        for (g, (pj, yj)) in grad.row_mut(i).iter_mut().zip(p.iter().zip(y)) {
            *g = (pj * mass - yj) / b;
        }
    }
    Ok((loss / b, grad))
}

/// `mu * ||w - anchor||^2` over trainable parameters, with its gradient
/// `2 mu (w - anchor)`. Per-tensor partial sums are combined in name order.
pub fn prox_term(params: &ModelState, anchor: &ModelState, mu: f64) -> Result<(f64, Gradients)> {
    params.check_schema(anchor)?;
    if mu < 0.0 {
        return Err(Error::InvalidArgument(format!("mu {mu} is negative")));
    }
    let mut partial: Vec<(&str, f64)> = Vec::new();
    let mut grads = Vec::new();
    for (p, a) in params.trainable().zip(anchor.trainable()) {
        let mut sq = 0.0;
        let mut g = Vec::with_capacity(p.values.len());
        for (w, w0) in p.values.iter().zip(&a.values) {
            let d = w - w0;
            sq += d * d;
            g.push(2.0 * mu * d);
        }
        partial.push((p.name.as_str(), sq));
        grads.push(ParamGrad {
            name: p.name.clone(),
            values: g,
        });
    }
    partial.sort_by(|a, b| a.0.cmp(b.0));
    let total: f64 = partial.iter().map(|(_, v)| v).sum();
    Ok((
        mu * total,
        Gradients {
            params: grads,
            input: Tensor::zeros(vec![0]),
        },
    ))
}

fn cosine_with_grad(z: &[f64], other: &[f64]) -> Result<(f64, Vec<f64>)> {
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let no = other.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nz == 0.0 || no == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm representation".into(),
        ));
    }
    let dot: f64 = z.iter().zip(other).map(|(a, b)| a * b).sum();
    let sim = dot / (nz * no);
    let grad = z
        .iter()
        .zip(other)
        .map(|(zi, oi)| oi / (nz * no) - sim * zi / (nz * nz))
        .collect();
    Ok((sim, grad))
}

/// Model-contrastive loss, averaged over the batch, with its gradient on `z`.
///
/// `-mu * log( e^{sim(z,z_glob)/tau} / (e^{sim(z,z_glob)/tau} + e^{sim(z,z_prev)/tau}) )`
pub fn contrastive(
    z: &Tensor,
    z_glob: &Tensor,
    z_prev: &Tensor,
    tau: f64,
    mu: f64,
) -> Result<(f64, Tensor)> {
    if z.shape != z_glob.shape || z.shape != z_prev.shape {
        return Err(Error::Shape {
            layer: "representation".into(),
            expected: z.shape.clone(),
            found: if z.shape != z_glob.shape {
                z_glob.shape.clone()
            } else {
                z_prev.shape.clone()
            },
        });
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
    }
    let b = z.batch() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(z.shape.clone());
    for i in 0..z.batch() {
        let (s_pos, g_pos) = cosine_with_grad(z.row(i), z_glob.row(i))?;
        let (s_neg, g_neg) = cosine_with_grad(z.row(i), z_prev.row(i))?;
        let (a, c) = (s_pos / tau, s_neg / tau);
        let m = a.max(c);
        let lse = m + ((a - m).exp() + (c - m).exp()).ln();
        loss += mu * (lse - a);
        let pa = (a - lse).exp();
        let pc = (c - lse).exp();
        let da = mu * (pa - 1.0) / tau;
        let dc = mu * pc / tau;
        for (g, (gp, gn)) in grad.row_mut(i).iter_mut().zip(g_pos.iter().zip(&g_neg)) {
            *g = (da * gp + dc * gn) / b;
        }
    }
    Ok((loss / b, grad))
}

/// `KL(softmax(teacher/T) || softmax(student/T))`, batch mean, with its
/// gradient on the student logits.
pub fn distillation(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if student.shape != teacher.shape {
        return Err(Error::Shape {
            layer: "teacher_logits".into(),
            expected: student.shape.clone(),
            found: teacher.shape.clone(),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let b = student.batch() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(student.shape.clone());
    for i in 0..student.batch() {
        let s: Vec<f64> = student.row(i).iter().map(|v| v / temperature).collect();
        let t: Vec<f64> = teacher.row(i).iter().map(|v| v / temperature).collect();
        let log_ps = log_softmax(&s);
        let log_pt = log_softmax(&t);
        let mut kl = 0.0;
        for (lt, ls) in log_pt.iter().zip(&log_ps) {
            let pt = lt.exp();
            if pt > 0.0 {
                kl += pt * (lt - ls);
            }
        }
        loss += kl;
        for (g, (ls, lt)) in grad.row_mut(i).iter_mut().zip(log_ps.iter().zip(&log_pt)) {
            *g = (ls.exp() - lt.exp()) / (temperature * b);
        }
    }
    Ok((loss / b, grad))
}

/// Mean squared error over all elements and its gradient on `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape != target.shape {
        return Err(Error::Shape {
            layer: "target".into(),
            expected: pred.shape.clone(),
            found: target.shape.clone(),
        });
    }
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape.clone(), grad)))
}
