use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place. Parameters named in `frozen`
/// (and parameters without a gradient entry) are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::Missing(format!("optimizer state for `{name}`")));
        };
        if m.len() != tensor.len() || g.len() != tensor.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("`{name}` has {} values, state {}", tensor.len(), m.len()),
            });
        }
        for (((p, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` at `warmup`, then `base_lr * sqrt(warmup / step)`.
pub fn inverse_sqrt_lr(step: usize, warmup: usize, base_lr: f64) -> Result<f64> {
    if warmup == 0 {
        return Err(Error::Config("warmup must be > 0".into()));
    }
    if step == 0 {
        return Err(Error::Config("schedule steps start at 1".into()));
    }
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (warmup as f64 / step as f64).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![v]));
        p
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("w", vec![v]);
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut st, &AdamConfig::default(), &BTreeSet::new()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m = 0.1, v = 0.02; mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &grad(1.0), &mut st, &cfg, &BTreeSet::new()).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut p, &grad(1.0), &mut st, &cfg, &BTreeSet::new()).is_err());
    }

    #[test]
    fn frozen_names_are_skipped() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let frozen: BTreeSet<String> = ["w".to_string()].into();
        adam_step(&mut p, &grad(3.0), &mut st, &AdamConfig::default(), &frozen).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn schedule_shape() {
        let base = 0.01;
        assert_eq!(inverse_sqrt_lr(4000, 4000, base).unwrap(), base);
        assert!((inverse_sqrt_lr(16000, 4000, base).unwrap() - base / 2.0).abs() < 1e-18);
        assert!((inverse_sqrt_lr(2000, 4000, base).unwrap() - base / 2.0).abs() < 1e-18);
        assert!(inverse_sqrt_lr(1, 0, base).is_err());
    }
}
