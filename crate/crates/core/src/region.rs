//! Low-forgetting-risk update regions.
//!
//! A region is a per-element box `[lower, upper]` around the pretrained
//! parameters θ0. The curvature method (CM) freezes the elements with the
//! largest Fisher values inside every tensor and gives the rest a width
//! proportional to `|θ0|`. The output method (OM) moves the parameters as
//! far as it can while keeping the output distribution on previous-task
//! data close to θ0's, then spans the box between the two points.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiag;
use crate::model::{Batch, Bindings, Model};
use crate::stats;
use crate::tasks::{Corpus, Pair};
use crate::tensor::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionMethod {
    #[serde(rename = "CM")]
    Cm,
    #[serde(rename = "OM")]
    Om,
}

impl std::fmt::Display for RegionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegionMethod::Cm => "CM",
            RegionMethod::Om => "OM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionSearchConfig {
    /// Percent of each tensor's elements fixed (CM).
    pub rho: f64,
    /// Relative half-width (CM).
    pub lambda: f64,
    /// Expansion weight (OM).
    pub alpha: f64,
    pub om_lr: f64,
    pub om_steps: usize,
    pub seed: u64,
    /// Uniform start jitter of relative size `jitter * |θ0|` (OM).
    pub jitter: f64,
    /// Minimum half-width of non-fixed elements (CM); 0 keeps θ0 = 0 frozen.
    pub abs_floor: f64,
    /// Student dropout during OM search; `None` uses the model's rate.
    pub om_dropout: Option<f64>,
    /// Sentence pairs per forward pass during OM search.
    pub om_chunk: usize,
}

impl Default for RegionSearchConfig {
    fn default() -> Self {
        Self {
            rho: 75.0,
            lambda: 0.1,
            alpha: 1.0,
            om_lr: 2e-4,
            om_steps: 5000,
            seed: 0,
            jitter: 0.0,
            abs_floor: 0.0,
            om_dropout: None,
            om_chunk: 64,
        }
    }
}

impl RegionSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 100]", self.rho)));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("jitter", self.jitter), ("abs_floor", self.abs_floor)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(d) = self.om_dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("om_dropout {d} outside [0, 1)")));
            }
        }
        if self.om_chunk == 0 {
            return Err(Error::Config("om_chunk must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProvenance {
    pub config: RegionSearchConfig,
    /// Fingerprint of θ0.
    pub theta0: String,
    pub data_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRegion {
    pub lower: BTreeMap<String, Tensor>,
    pub upper: BTreeMap<String, Tensor>,
    pub method: RegionMethod,
    pub provenance: RegionProvenance,
}

/// Largest value `u >= center` with `u - center <= width`, evaluated in
/// floating point, so a drift check against `width` holds exactly.
fn upper_bound(center: f64, width: f64) -> f64 {
    let mut u = center + width;
    while u - center > width {
        u = u.next_down();
    }
    u
}

fn lower_bound(center: f64, width: f64) -> f64 {
    let mut l = center - width;
    while center - l > width {
        l = l.next_up();
    }
    l
}

/// Indices of the `count` largest values; ties go to the lower index.
pub fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Number of elements CM fixes in a tensor of `n` elements.
pub fn fixed_count(rho: f64, n: usize) -> usize {
    ((rho / 100.0 * n as f64).round() as usize).min(n)
}

/// Curvature-based region. Ranking is per named tensor.
pub fn search_cm(
    theta0: &ParamStore,
    frozen: &BTreeSet<String>,
    fisher: &FisherDiag,
    cfg: &RegionSearchConfig,
) -> Result<UpdateRegion> {
    cfg.validate()?;
    fisher.check_matches(theta0)?;
    let mut lower = BTreeMap::new();
    let mut upper = BTreeMap::new();
    for (name, t) in theta0.iter() {
        let mut lo = t.clone();
        let mut hi = t.clone();
        if !frozen.contains(name) {
            let f = fisher.values[name].data();
            let mut fixed = vec![false; t.len()];
            for i in top_indices(f, fixed_count(cfg.rho, t.len())) {
                fixed[i] = true;
            }
            for (i, &c) in t.data().iter().enumerate() {
                if fixed[i] {
                    continue;
                }
                let w = (cfg.lambda * c.abs()).max(cfg.abs_floor);
                lo.data_mut()[i] = lower_bound(c, w);
                hi.data_mut()[i] = upper_bound(c, w);
            }
        }
        lower.insert(name.clone(), lo);
        upper.insert(name.clone(), hi);
    }
    let region = UpdateRegion {
        lower,
        upper,
        method: RegionMethod::Cm,
        provenance: RegionProvenance {
            config: cfg.clone(),
            theta0: theta0.fingerprint(),
            data_id: fisher.source_data_id.clone(),
        },
    };
    region.validate(theta0, frozen)?;
    Ok(region)
}

/// Per-step trace of the OM search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OmLog {
    pub kl: Vec<f64>,
    pub penalty: Vec<f64>,
}

/// Output-based region from previous-task validation data.
pub fn search_om(model: &Model, valid: &[Corpus], cfg: &RegionSearchConfig) -> Result<(UpdateRegion, OmLog)> {
    cfg.validate()?;
    if cfg.om_steps > 0 && !(cfg.om_lr > 0.0) {
        return Err(Error::Config(format!("om_lr must be > 0, got {}", cfg.om_lr)));
    }
    let mut pairs: Vec<&Pair> = valid.iter().flat_map(|c| &c.pairs).collect();
    if pairs.is_empty() {
        return Err(Error::Empty("OM validation data"));
    }
    // canonical order: the result must not depend on how the data was listed
    pairs.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
    let batches: Vec<Batch> = pairs
        .chunks(cfg.om_chunk)
        .map(|c| Batch::from_pairs(c.iter().copied()))
        .collect::<Result<_>>()?;
    let total_tokens: usize = batches.iter().map(Batch::target_tokens).sum();
    let teachers: Vec<Vec<f64>> = batches
        .iter()
        .map(|b| model.log_probs(b).map(Tensor::into_data))
        .collect::<Result<_>>()?;
    let weights: Vec<Vec<f64>> = batches
        .iter()
        .map(|b| {
            b.tgt_mask
                .iter()
                .map(|&m| if m { 1.0 / total_tokens as f64 } else { 0.0 })
                .collect()
        })
        .collect();

    let theta0 = &model.params;
    let mut student = model.clone();
    if let Some(d) = cfg.om_dropout {
        student.config.dropout = d;
    }
    if cfg.jitter > 0.0 {
        let mut r = rng::stream(cfg.seed, "om-jitter");
        for (name, t) in student.params.iter_mut() {
            if model.frozen.contains(name) {
                continue;
            }
            for v in t.data_mut() {
                *v += cfg.jitter * v.abs() * r.random_range(-1.0..=1.0);
            }
        }
    }
    let m = theta0.total_count() as f64;
    let adam = AdamConfig {
        lr: cfg.om_lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&student.params);
    let mut log = OmLog::default();
    for step in 0..cfg.om_steps {
        let mut grads = Gradients::zeros_like(&student.params);
        let mut kl = 0.0;
        for (c, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let b = Bindings::trainable(&mut g, &student.params);
            let mut r = rng::stream(cfg.seed, &format!("om/{step}/{c}"));
            let dropout = (student.config.dropout > 0.0).then_some(&mut r);
            let logits = student.logits(&mut g, &b, batch, dropout)?;
            let loss = g.kl_student_teacher(logits, &teachers[c], &weights[c])?;
            g.backward(loss)?;
            kl += g.scalar(loss);
            grads.add_scaled(&b.gradients(&g), 1.0);
        }
        // expansion term: -(α/M) Σ (θ - θ0)²
        let mut penalty = 0.0;
        for (name, t) in student.params.iter() {
            let g = grads.get_mut(name).expect("zeros_like covers every name");
            for ((gi, &v), &v0) in g.iter_mut().zip(t.data()).zip(theta0.require(name)?.data()) {
                let d = v - v0;
                penalty += d * d;
                *gi -= 2.0 * cfg.alpha / m * d;
            }
        }
        let penalty = -cfg.alpha / m * penalty;
        if !(kl + penalty).is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                loss: kl + penalty,
            });
        }
        log.kl.push(kl);
        log.penalty.push(penalty);
        adam_step(&mut student.params, &grads, &mut state, &adam, &model.frozen)?;
    }

    let mut lower = BTreeMap::new();
    let mut upper = BTreeMap::new();
    for (name, t0) in theta0.iter() {
        let t1 = student.params.require(name)?;
        let (mut lo, mut hi) = (t0.clone(), t0.clone());
        if !model.frozen.contains(name) {
            for (i, (&a, &b)) in t0.data().iter().zip(t1.data()).enumerate() {
                lo.data_mut()[i] = a.min(b);
                hi.data_mut()[i] = a.max(b);
            }
        }
        lower.insert(name.clone(), lo);
        upper.insert(name.clone(), hi);
    }
    let region = UpdateRegion {
        lower,
        upper,
        method: RegionMethod::Om,
        provenance: RegionProvenance {
            config: cfg.clone(),
            theta0: theta0.fingerprint(),
            data_id: valid.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join("+"),
        },
    };
    region.validate(theta0, &model.frozen)?;
    Ok((region, log))
}

/// Clamps every covered parameter into its box. Idempotent.
pub fn project(params: &mut ParamStore, region: &UpdateRegion) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let (Some(lo), Some(hi)) = (region.lower.get(name), region.upper.get(name)) else {
            continue;
        };
        if lo.len() != t.len() {
            return Err(Error::Shape {
                op: "project",
                detail: format!("`{name}`: region {:?} vs param {:?}", lo.shape(), t.shape()),
            });
        }
        for ((v, &l), &u) in t.data_mut().iter_mut().zip(lo.data()).zip(hi.data()) {
            *v = v.clamp(l, u);
        }
    }
    Ok(())
}

impl UpdateRegion {
    /// Checks ordering, feasibility of θ0 and degeneracy of frozen tensors.
    /// Tensors of θ0 the region does not cover are unconstrained.
    pub fn validate(&self, theta0: &ParamStore, frozen: &BTreeSet<String>) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.keys().zip(self.upper.keys()).any(|(a, b)| a != b) {
            return Err(Error::Invariant("lower and upper bounds cover different tensors".into()));
        }
        for (name, lo) in &self.lower {
            let hi = &self.upper[name];
            let t0 = theta0.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if lo.shape() != t0.shape() || hi.shape() != t0.shape() {
                return Err(Error::Shape {
                    op: "region",
                    detail: format!("`{name}` bounds do not match θ0 {:?}", t0.shape()),
                });
            }
            let is_frozen = frozen.contains(name);
            for ((&c, &l), &u) in t0.data().iter().zip(lo.data()).zip(hi.data()) {
                if !(l <= c && c <= u) {
                    return Err(Error::Invariant(format!("`{name}`: θ0 {c} outside [{l}, {u}]")));
                }
                if is_frozen && (l != c || u != c) {
                    return Err(Error::Invariant(format!("frozen `{name}` has a non-degenerate region")));
                }
            }
        }
        Ok(())
    }

    /// Drops the given tensors from the region, leaving them unconstrained.
    pub fn release<'n>(&mut self, names: impl IntoIterator<Item = &'n String>) {
        for n in names {
            self.lower.remove(n);
            self.upper.remove(n);
        }
    }

    /// True when every parameter lies inside its box, exactly.
    pub fn contains(&self, params: &ParamStore) -> bool {
        params.iter().all(|(name, t)| match (self.lower.get(name), self.upper.get(name)) {
            (Some(lo), Some(hi)) => t
                .data()
                .iter()
                .zip(lo.data())
                .zip(hi.data())
                .all(|((&v, &l), &u)| l <= v && v <= u),
            _ => true,
        })
    }

    /// Elementwise `lower ⊆ other.lower` and `upper ⊆ other.upper`.
    pub fn is_subset_of(&self, other: &UpdateRegion) -> bool {
        self.lower.iter().all(|(n, lo)| {
            let (Some(olo), Some(ohi), Some(hi)) = (other.lower.get(n), other.upper.get(n), self.upper.get(n)) else {
                return false;
            };
            lo.data().iter().zip(olo.data()).all(|(a, b)| a >= b)
                && hi.data().iter().zip(ohi.data()).all(|(a, b)| a <= b)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub elements: usize,
    pub zero_width_fraction: f64,
    /// Mean of `(upper - lower) / (2 |θ0|)` over elements with θ0 != 0.
    pub mean_relative_width: f64,
    pub median_relative_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub method: RegionMethod,
    pub overall: WidthSummary,
    /// Keyed by module: tensor name without its `.weight` / `.bias` suffix.
    pub per_module: BTreeMap<String, WidthSummary>,
}

fn summarize(widths: &[f64], relative: &[f64]) -> WidthSummary {
    let zero = widths.iter().filter(|w| **w == 0.0).count();
    WidthSummary {
        elements: widths.len(),
        zero_width_fraction: if widths.is_empty() { 0.0 } else { zero as f64 / widths.len() as f64 },
        mean_relative_width: stats::mean(relative),
        median_relative_width: stats::median(relative),
    }
}

fn module_of(name: &str) -> &str {
    name.strip_suffix(".weight")
        .or_else(|| name.strip_suffix(".bias"))
        .unwrap_or(name)
}

pub fn region_stats(region: &UpdateRegion, theta0: &ParamStore) -> Result<RegionStats> {
    let mut all_w = Vec::new();
    let mut all_r = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, lo) in &region.lower {
        let hi = &region.upper[name];
        let t0 = theta0.require(name)?;
        let entry = groups.entry(module_of(name).to_string()).or_default();
        for ((&l, &u), &c) in lo.data().iter().zip(hi.data()).zip(t0.data()) {
            let w = u - l;
            entry.0.push(w);
            all_w.push(w);
            if c != 0.0 {
                let r = w / (2.0 * c.abs());
                entry.1.push(r);
                all_r.push(r);
            }
        }
    }
    Ok(RegionStats {
        method: region.method,
        overall: summarize(&all_w, &all_r),
        per_module: groups
            .into_iter()
            .map(|(k, (w, r))| (k, summarize(&w, &r)))
            .collect(),
    })
}
