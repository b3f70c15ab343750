//! Regularizers of the baseline methods, with their gradients.

use crate::error::{Error, Result};
use crate::fisher::FisherDiag;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor};

fn quadratic<F>(theta: &ParamStore, theta0: &ParamStore, alpha: f64, m: usize, weight: F) -> Result<(f64, Gradients)>
where
    F: Fn(&str, usize) -> f64,
{
    theta.check_same_layout(theta0, "penalty")?;
    if m == 0 {
        return Err(Error::Config("parameter count M must be > 0".into()));
    }
    let c = alpha / m as f64;
    let mut value = 0.0;
    let mut grads = Gradients::new();
    for ((name, t), (_, t0)) in theta.iter().zip(theta0.iter()) {
        let mut g = Vec::with_capacity(t.len());
        for (i, (&v, &v0)) in t.data().iter().zip(t0.data()).enumerate() {
            let w = weight(name, i);
            let d = v - v0;
            value += w * d * d;
            g.push(2.0 * c * w * d);
        }
        grads.insert(name.clone(), g);
    }
    Ok((c * value, grads))
}

/// `(α/M) Σ (θ − θ0)²` and its gradient.
pub fn loss_l2(theta: &ParamStore, theta0: &ParamStore, alpha: f64, m: usize) -> Result<(f64, Gradients)> {
    quadratic(theta, theta0, alpha, m, |_, _| 1.0)
}

/// `(α/M) Σ F_i (θ − θ0)²` and its gradient.
pub fn loss_ewc(
    theta: &ParamStore,
    theta0: &ParamStore,
    fisher: &FisherDiag,
    alpha: f64,
    m: usize,
) -> Result<(f64, Gradients)> {
    fisher.check_matches(theta)?;
    if fisher.values.values().any(|t| t.data().iter().any(|&f| !(f >= 0.0))) {
        return Err(Error::Invariant("Fisher values must be non-negative".into()));
    }
    quadratic(theta, theta0, alpha, m, |name, i| fisher.values[name].data()[i])
}

/// `α` times the mean over unmasked rows of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn loss_kd(student_logits: &Tensor, teacher_logits: &Tensor, mask: &[bool], alpha: f64) -> Result<f64> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Shape {
            op: "loss_kd",
            detail: format!("{:?} vs {:?}", student_logits.shape(), teacher_logits.shape()),
        });
    }
    let rows = student_logits.len() / student_logits.last_dim().max(1);
    if mask.len() != rows {
        return Err(Error::Shape {
            op: "loss_kd",
            detail: format!("mask has {} entries for {rows} rows", mask.len()),
        });
    }
    let n = mask.iter().filter(|m| **m).count().max(1) as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { alpha / n } else { 0.0 }).collect();
    let mut g = Graph::new();
    let t = g.constant(teacher_logits.clone());
    let t_lp = g.log_softmax(t);
    let teacher = g.value(t_lp).data().to_vec();
    let s = g.constant(student_logits.clone());
    let kl = g.kl_teacher_student(s, &teacher, &weights)?;
    Ok(g.scalar(kl))
}
