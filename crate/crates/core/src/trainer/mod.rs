//! Continual-learning training loops: plain fine-tuning, the penalty and
//! distillation baselines, temperature-mixed training with previous data,
//! and hard-constrained training inside an update region.

mod penalty;
mod sampler;
mod sequential;

pub use penalty::{loss_ewc, loss_kd, loss_l2};
pub use sampler::{temperature_probabilities, MixedSampler};
pub use sequential::{sequential_train, sequential_train_with, Stage, StageLog};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiag;
use crate::model::{Batch, Bindings, Model};
use crate::region::{project, UpdateRegion};
use crate::tasks::{Corpus, Pair};
use crate::tensor::rng;
use crate::tensor::{adam_step, inverse_sqrt_lr, AdamConfig, AdamState, Gradients, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    #[default]
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "EWC")]
    Ewc,
    #[serde(rename = "KD")]
    Kd,
    #[serde(rename = "MIXED_FT")]
    MixedFt,
    #[serde(rename = "LFR")]
    Lfr,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ft, Method::L2, Method::Ewc, Method::Kd, Method::MixedFt, Method::Lfr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::L2 => "L2",
            Method::Ewc => "EWC",
            Method::Kd => "KD",
            Method::MixedFt => "MIXED_FT",
            Method::Lfr => "LFR",
        }
    }

    /// Penalty weight used when the config leaves `alpha` unset.
    pub fn default_alpha(self) -> f64 {
        match self {
            Method::Kd => 1.0,
            Method::L2 => 0.01,
            Method::Ewc => 0.05,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected ft, l2, ewc, kd, mixed_ft or lfr)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Penalty or distillation weight; `None` takes the method default.
    pub alpha: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Parameters held fixed in addition to the model's own frozen set.
    pub freeze_names: BTreeSet<String>,
    pub seed: u64,
    /// Sampling temperature (mixed training only).
    pub temperature: f64,
    /// Micro-batches accumulated per optimizer step.
    pub update_freq: usize,
    /// Validation cadence in steps; 0 disables the hook.
    pub eval_every: usize,
    /// Return the parameters with the lowest validation loss.
    pub keep_best: bool,
    /// Freezing rules resolved against the model at the start of training.
    pub freeze: FreezePolicy,
    /// Mix the retained previous-task corpora into the batches (implied by
    /// Mixed-FT).
    pub mix_previous: bool,
}

/// Name-independent freezing rules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePolicy {
    pub norms: bool,
    /// Input token embeddings, original and extension rows.
    pub embeddings: bool,
    /// Train cross-attention only.
    pub cross_attention_only: bool,
}

impl FreezePolicy {
    pub fn resolve(&self, model: &Model) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if self.norms {
            out.extend(model.norm_param_names());
        }
        if self.embeddings {
            out.extend(model.params.names().filter(|n| n.starts_with("embed.tokens")).cloned());
        }
        if self.cross_attention_only {
            let keep = model.cross_attention_names();
            out.extend(model.params.names().filter(|n| !keep.contains(*n)).cloned());
        }
        out
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ft,
            alpha: None,
            lr: 5e-4,
            steps: 1000,
            batch_size: 32,
            warmup: 4000,
            freeze_names: BTreeSet::new(),
            seed: 0,
            temperature: 20.0,
            update_freq: 1,
            eval_every: 500,
            keep_best: false,
            freeze: FreezePolicy::default(),
            mix_previous: false,
        }
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.method.default_alpha())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.alpha() >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha())));
        }
        if self.batch_size == 0 || self.warmup == 0 || self.update_freq == 0 {
            return Err(Error::Config("batch_size, warmup and update_freq must be > 0".into()));
        }
        if (self.method == Method::MixedFt || self.mix_previous) && !(self.temperature >= 1.0) {
            return Err(Error::Config(format!("temperature must be >= 1, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Method-specific inputs besides the new-task data.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainAux<'a> {
    pub fisher: Option<&'a FisherDiag>,
    pub region: Option<&'a UpdateRegion>,
    /// Retained previous-task corpora (mixed training).
    pub prev_data: &'a [Corpus],
    /// New-task validation data for the eval hook.
    pub valid: &'a [Corpus],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: Method,
    /// Fingerprint of the starting parameters.
    pub theta0: String,
    pub rows: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub best_step: Option<usize>,
}

/// Token-weighted mean cross-entropy over a set of pairs, no dropout.
pub fn mean_token_loss(model: &Model, pairs: &[&Pair], chunk: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for c in pairs.chunks(chunk.max(1)) {
        let b = Batch::from_pairs(c.iter().copied())?;
        let n = b.target_tokens();
        total += model.loss(&b, None)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

struct Objective<'a> {
    teacher: Option<&'a Model>,
    alpha: f64,
}

fn micro_batch_grad(model: &Model, obj: &Objective<'_>, batch: &Batch, r: &mut rng::Rng) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let b = Bindings::trainable(&mut g, &model.params);
    let logits = model.logits(&mut g, &b, batch, Some(r))?;
    let logp = g.log_softmax(logits);
    let w = Model::mean_token_weights(batch);
    let mut loss = g.nll_gather(logp, &batch.tgt_out, &w)?;
    let (teacher, alpha) = (obj.teacher, obj.alpha);
    if let Some(t) = teacher {
        let t_lp = t.log_probs(batch)?;
        let kd_w: Vec<f64> = w.iter().map(|x| x * alpha).collect();
        let kd = g.kl_teacher_student(logits, t_lp.data(), &kd_w)?;
        loss = g.add(loss, kd)?;
    }
    g.backward(loss)?;
    Ok((g.scalar(loss), b.gradients(&g)))
}

/// Trains `model` on `new_data` with the configured method. The input
/// parameters are the θ0 snapshot every penalty and region refers to.
pub fn train(model: &Model, new_data: &[Corpus], cfg: &TrainConfig, aux: TrainAux<'_>) -> Result<(Model, TrainLog)> {
    train_with_state(model, new_data, cfg, aux).map(|(m, log, _)| (m, log))
}

/// [`train`], also returning the final optimizer state.
pub fn train_with_state(
    model: &Model,
    new_data: &[Corpus],
    cfg: &TrainConfig,
    aux: TrainAux<'_>,
) -> Result<(Model, TrainLog, AdamState)> {
    cfg.validate()?;
    let alpha = cfg.alpha();
    let theta0 = model.params.clone();
    let mut frozen = model.frozen.clone();
    for n in &cfg.freeze_names {
        if !theta0.contains(n) {
            return Err(Error::UnknownParam(n.clone()));
        }
        frozen.insert(n.clone());
    }
    frozen.extend(cfg.freeze.resolve(model));
    let region = match cfg.method {
        Method::Lfr => {
            let r = aux
                .region
                .ok_or_else(|| Error::Missing("update region (required by LFR)".into()))?;
            if !r.contains(&theta0) {
                return Err(Error::Invariant("θ0 lies outside the update region".into()));
            }
            Some(r)
        }
        _ => None,
    };
    let fisher = match cfg.method {
        Method::Ewc => {
            let f = aux
                .fisher
                .ok_or_else(|| Error::Missing("Fisher diagonal (required by EWC)".into()))?;
            f.check_matches(&theta0)?;
            Some(f)
        }
        _ => None,
    };
    let teacher = (cfg.method == Method::Kd).then(|| model.clone());

    let new_pairs: Vec<Pair> = new_data.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    if new_pairs.is_empty() {
        return Err(Error::Empty("new-task training data"));
    }
    let mut corpora: Vec<&[Pair]> = vec![&new_pairs];
    let temperature = if cfg.method == Method::MixedFt || cfg.mix_previous {
        corpora.extend(aux.prev_data.iter().map(|c| c.pairs.as_slice()));
        cfg.temperature
    } else {
        1.0
    };
    let mut sampler = MixedSampler::new(corpora, None, temperature, rng::derive_seed(cfg.seed, "batches"))?;
    let mut drop_rng = rng::stream(cfg.seed, "dropout");
    let valid_pairs: Vec<&Pair> = aux.valid.iter().flat_map(|c| &c.pairs).collect();

    let objective = Objective {
        teacher: teacher.as_ref(),
        alpha,
    };
    let m = theta0.total_count();
    let mut current = model.clone();
    let mut state = AdamState::new(&current.params);
    let mut log = TrainLog {
        method: cfg.method,
        theta0: theta0.fingerprint(),
        ..TrainLog::default()
    };
    let mut best: Option<(f64, crate::tensor::ParamStore)> = None;

    for step in 1..=cfg.steps {
        let lr = inverse_sqrt_lr(step, cfg.warmup, cfg.lr)?;
        let mut grads = Gradients::zeros_like(&current.params);
        let mut loss = 0.0;
        let inv = 1.0 / cfg.update_freq as f64;
        for _ in 0..cfg.update_freq {
            let pairs = sampler.next_batch(cfg.batch_size);
            let batch = Batch::from_pairs(pairs)?;
            let (l, g) = micro_batch_grad(&current, &objective, &batch, &mut drop_rng)?;
            loss += l * inv;
            grads.add_scaled(&g, inv);
        }
        let mut pen = 0.0;
        match cfg.method {
            Method::L2 => {
                let (v, g) = loss_l2(&current.params, &theta0, alpha, m)?;
                pen = v;
                grads.add_scaled(&g, 1.0);
            }
            Method::Ewc => {
                let (v, g) = loss_ewc(&current.params, &theta0, fisher.expect("checked above"), alpha, m)?;
                pen = v;
                grads.add_scaled(&g, 1.0);
            }
            _ => {}
        }
        if !(loss + pen).is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss: loss + pen });
        }
        if lr > 0.0 {
            let adam = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            adam_step(&mut current.params, &grads, &mut state, &adam, &frozen)?;
        }
        if let Some(r) = region {
            project(&mut current.params, r)?;
            if !r.contains(&current.params) {
                return Err(Error::Invariant(format!("parameters left the region at step {step}")));
            }
        }
        log.rows.push(LogRow { step, lr, loss, penalty: pen });

        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        if eval_now && !valid_pairs.is_empty() {
            let vl = mean_token_loss(&current, &valid_pairs, 64)?;
            log.evals.push(EvalRow { step, valid_loss: vl });
            if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, current.params.clone()));
                log.best_step = Some(step);
            }
        }
    }
    if let Some((_, params)) = best {
        current.params = params;
    }
    Ok((current, log, state))
}
