//! Diagonal empirical Fisher information and curvature oracles.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::tasks::Corpus;
use crate::tensor::{Gradients, ParamStore, Tensor};

/// Examples per parallel chunk. Chunks are reduced in order, so the result
/// does not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub values: BTreeMap<String, Tensor>,
    pub sample_count: usize,
    pub source_data_id: String,
}

impl FisherDiag {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    /// Errors unless every parameter has a same-shaped entry.
    /// Adds zero entries for parameters the diagonal does not cover yet,
    /// e.g. vocabulary extensions created after it was computed.
    pub fn extend_zeros(&mut self, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.values
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(t.shape()));
        }
    }

    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        for (n, t) in params.iter() {
            let f = self
                .values
                .get(n)
                .ok_or_else(|| Error::Missing(format!("Fisher values for `{n}`")))?;
            if f.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "fisher",
                    detail: format!("`{n}`: fisher {:?} vs param {:?}", f.shape(), t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Mean of squared per-example gradients. `grad_of(i)` returns the
/// gradient of the log-likelihood (or its negation) of example `i`.
pub fn fisher_from_examples<F>(params: &ParamStore, n: usize, source_data_id: &str, grad_of: F) -> Result<FisherDiag>
where
    F: Fn(usize) -> Result<Gradients> + Sync,
{
    if n == 0 {
        return Err(Error::Empty("Fisher dataset"));
    }
    let mut acc: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let grads: Vec<Gradients> = (start..end).into_par_iter().map(&grad_of).collect::<Result<_>>()?;
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of example {}", start + i),
                });
            }
            for (name, a) in acc.iter_mut() {
                let gi = g
                    .get(name)
                    .ok_or_else(|| Error::Missing(format!("gradient for `{name}`")))?;
                for (x, &v) in a.iter_mut().zip(gi) {
                    *x += v * v;
                }
            }
        }
    }
    let values = acc
        .into_iter()
        .map(|(name, a)| {
            let shape = params.require(&name)?.shape().to_vec();
            let data = a.into_iter().map(|x| x / n as f64).collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(FisherDiag {
        values,
        sample_count: n,
        source_data_id: source_data_id.to_string(),
    })
}

/// Empirical Fisher diagonal of a model over a corpus, using sentence-level
/// log-likelihoods and no dropout.
pub fn empirical_fisher_diag(model: &Model, data: &Corpus) -> Result<FisherDiag> {
    fisher_over_pairs(model, &data.pairs.iter().collect::<Vec<_>>(), &data.id)
}

/// As [`empirical_fisher_diag`], pooling several corpora.
pub fn empirical_fisher_diag_multi(model: &Model, data: &[Corpus]) -> Result<FisherDiag> {
    let pairs: Vec<_> = data.iter().flat_map(|c| &c.pairs).collect();
    let id = data.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join("+");
    fisher_over_pairs(model, &pairs, &id)
}

fn fisher_over_pairs(model: &Model, pairs: &[&crate::tasks::Pair], id: &str) -> Result<FisherDiag> {
    fisher_from_examples(&model.params, pairs.len(), id, |i| {
        let batch = Batch::from_pairs([pairs[i]])?;
        Ok(model.nll_sum_and_grad(&batch)?.1)
    })
}

/// Central second differences `(L(θ+h) − 2L(θ) + L(θ−h)) / h²` for the
/// listed elements of each named tensor.
pub fn finite_diff_hessian_diag<F>(
    loss_fn: F,
    params: &ParamStore,
    subset: &BTreeMap<String, Vec<usize>>,
    step: f64,
) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let check = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: format!("loss at {what}"),
            })
        }
    };
    let base = check(loss_fn(params)?, "θ")?;
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    for (name, idx) in subset {
        params.require(name)?;
        let mut diag = Vec::with_capacity(idx.len());
        for &i in idx {
            let orig = params.require(name)?.data()[i];
            let set = |p: &mut ParamStore, v: f64| {
                p.get_mut(name).expect("checked above").data_mut()[i] = v;
            };
            set(&mut probe, orig + step);
            let up = check(loss_fn(&probe)?, &format!("{name}[{i}] + h"))?;
            set(&mut probe, orig - step);
            let down = check(loss_fn(&probe)?, &format!("{name}[{i}] - h"))?;
            set(&mut probe, orig);
            diag.push((up - 2.0 * base + down) / (step * step));
        }
        out.insert(name.clone(), diag);
    }
    Ok(out)
}

/// Closed-form models used as independent checks of the estimators.
pub mod oracles {
    use crate::error::Result;
    use crate::tensor::{Gradients, Graph, Tensor};

    /// Linear softmax classifier `p(y|x) = softmax(W x)` with `W: [K, D]`.
    #[derive(Debug, Clone)]
    pub struct SoftmaxRegression {
        pub weight: Tensor,
    }

    impl SoftmaxRegression {
        pub fn classes(&self) -> usize {
            self.weight.shape()[0]
        }

        pub fn probs(&self, x: &[f64]) -> Vec<f64> {
            let d = x.len();
            let logits: Vec<f64> = self
                .weight
                .data()
                .chunks(d)
                .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }

        /// Gradient of `log p(y|x)` through the autodiff graph.
        pub fn log_lik_grad(&self, x: &[f64], y: usize) -> Result<Gradients> {
            let mut g = Graph::new();
            let w = g.param(self.weight.clone());
            let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
            let logits = g.matmul_t(xv, w)?;
            let lp = g.log_softmax(logits);
            let nll = g.nll_gather(lp, &[y], &[1.0])?;
            let ll = g.scale(nll, -1.0);
            g.backward(ll)?;
            let mut out = Gradients::new();
            out.insert("weight", g.grad(w).map(<[f64]>::to_vec).unwrap_or_default());
            Ok(out)
        }

        /// Diagonal of the true Fisher at `x`: expectation of the squared
        /// score over `y ~ p(y|x)`, by enumeration.
        pub fn true_fisher_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
            let p = self.probs(x);
            let mut out = vec![0.0; self.weight.len()];
            for (y, &py) in p.iter().enumerate() {
                let g = self.log_lik_grad(x, y)?;
                for (o, v) in out.iter_mut().zip(g.get("weight").unwrap_or(&[])) {
                    *o += py * v * v;
                }
            }
            Ok(out)
        }

        /// Diagonal of the analytic Hessian of `−log p(y|x)`, which does not
        /// depend on `y`: `p_k (1 − p_k) x_d²`.
        pub fn expected_hessian_diag(&self, x: &[f64]) -> Vec<f64> {
            let p = self.probs(x);
            let mut out = Vec::with_capacity(self.weight.len());
            for pk in &p {
                for xd in x {
                    out.push(pk * (1.0 - pk) * xd * xd);
                }
            }
            out
        }
    }

    /// Score of a one-parameter Bernoulli model `p(y=1) = sigmoid(θ)`.
    pub fn bernoulli_score(theta: f64, y: bool) -> Result<f64> {
        // logits [0, θ] give p(1) = sigmoid(θ)
        let mut g = Graph::new();
        let t = g.param(Tensor::from_vec(vec![theta]));
        let zero = g.constant(Tensor::from_vec(vec![0.0]));
        let col0 = g.reshape(zero, &[1, 1])?;
        let col1 = g.reshape(t, &[1, 1])?;
        let both = g.concat_rows(&[col0, col1])?;
        let logits = g.reshape(both, &[1, 2])?;
        let lp = g.log_softmax(logits);
        let nll = g.nll_gather(lp, &[usize::from(y)], &[1.0])?;
        g.backward(nll)?;
        Ok(-g.grad(t).map_or(0.0, |v| v[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::Pair;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                layers: 1,
                model_dim: 8,
                ffn_dim: 8,
                heads: 2,
                vocab_size: 12,
                max_len: 8,
                dropout: 0.3,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap()
    }

    fn corpus(pairs: Vec<Pair>) -> Corpus {
        Corpus {
            id: "toy".into(),
            direction: crate::tasks::Direction::new(0, 1),
            pairs,
            seed: 0,
        }
    }

    fn pairs() -> Vec<Pair> {
        vec![
            Pair { src: vec![4, 6, 7], tgt: vec![5, 8, 9] },
            Pair { src: vec![5, 9], tgt: vec![4, 10, 11, 6] },
            Pair { src: vec![4, 11, 10, 7], tgt: vec![5, 6] },
        ]
    }

    #[test]
    fn bernoulli_quarter() {
        let s = oracles::bernoulli_score(0.0, true).unwrap();
        assert!((s * s - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matches_per_example_loop() {
        let m = tiny();
        let c = corpus(pairs());
        let f = empirical_fisher_diag(&m, &c).unwrap();
        f.check_matches(&m.params).unwrap();
        let mut brute: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for p in &c.pairs {
            let (_, g) = m.nll_sum_and_grad(&Batch::from_pairs([p]).unwrap()).unwrap();
            for (n, v) in g.iter() {
                let e = brute.entry(n.clone()).or_insert_with(|| vec![0.0; v.len()]);
                for (a, b) in e.iter_mut().zip(v) {
                    *a += b * b / 3.0;
                }
            }
        }
        for (n, t) in &f.values {
            for (a, b) in t.data().iter().zip(&brute[n]) {
                assert!((a - b).abs() < 1e-10);
                assert!(*a >= 0.0);
            }
        }
    }

    #[test]
    fn duplication_invariant() {
        let m = tiny();
        let once = empirical_fisher_diag(&m, &corpus(pairs())).unwrap();
        let twice = empirical_fisher_diag(&m, &corpus([pairs(), pairs()].concat())).unwrap();
        for (n, t) in &once.values {
            for (a, b) in t.data().iter().zip(twice.values[n].data()) {
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(empirical_fisher_diag(&tiny(), &corpus(vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn hessian_of_simple_functions() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(vec![0.3, -1.2]));
        p.insert("b", Tensor::from_vec(vec![1.0]));
        let subset: BTreeMap<String, Vec<usize>> = [("a".to_string(), vec![0, 1])].into();
        let sq = |q: &ParamStore| Ok(q.iter().flat_map(|(_, t)| t.data().to_vec()).map(|x| x * x).sum());
        let h = finite_diff_hessian_diag(sq, &p, &subset, 1e-4).unwrap();
        for v in &h["a"] {
            assert!((v - 2.0).abs() < 1e-5);
        }
        let quart = |q: &ParamStore| Ok(q.get("b").unwrap().data()[0].powi(4));
        let only_b: BTreeMap<String, Vec<usize>> = [("b".to_string(), vec![0])].into();
        let h = finite_diff_hessian_diag(quart, &p, &only_b, 1e-3).unwrap();
        assert!((h["b"][0] - 12.0).abs() < 1e-3);
        let bad = |_: &ParamStore| Ok(f64::NAN);
        assert!(finite_diff_hessian_diag(bad, &p, &only_b, 1e-3).is_err());
    }

    #[test]
    fn softmax_regression_fisher_equals_hessian() {
        let model = oracles::SoftmaxRegression {
            weight: Tensor::new(vec![3, 2], vec![0.5, -0.3, 0.1, 0.8, -0.7, 0.2]).unwrap(),
        };
        let x = [1.3, -0.4];
        let f = model.true_fisher_diag(&x).unwrap();
        let h = model.expected_hessian_diag(&x);
        for (a, b) in f.iter().zip(&h) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
