use serde::{Deserialize, Serialize};

use super::{train, Method, TrainAux, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::fisher::empirical_fisher_diag_multi;
use crate::model::Model;
use crate::region::{region_stats, search_cm, search_om, RegionMethod, RegionSearchConfig, RegionStats};
use crate::tensor::rng;
use crate::tasks::Corpus;

/// One adaptation stage of a sequential run.
#[derive(Debug, Clone)]
pub struct Stage<'a> {
    pub name: String,
    pub train: &'a [Corpus],
    /// Validation data of this stage's task; later stages treat it as
    /// previous-task proxy data.
    pub valid: &'a [Corpus],
    pub cfg: TrainConfig,
    /// Region search used when `cfg.method` is LFR.
    pub region: Option<(RegionMethod, RegionSearchConfig)>,
    /// Vocabulary rows added after the region is computed and before
    /// training; the new tensors are unconstrained and get zero Fisher.
    pub extend_vocab: usize,
    /// Retained previous-task corpora for mixed training.
    pub retained: &'a [Corpus],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    /// Fingerprint of the parameters this stage started from.
    pub theta0: String,
    pub fisher_source: Option<String>,
    /// Fingerprint the stage's region was computed from.
    pub region_theta0: Option<String>,
    pub region_stats: Option<RegionStats>,
    pub train: TrainLog,
}

/// Runs the stages in order. Before each stage θ0, the Fisher diagonal and
/// the region are recomputed from the current model, using the original
/// previous-task validation data plus every earlier stage's validation data.
pub fn sequential_train(model: &Model, prev_valid: &[Corpus], stages: &[Stage<'_>]) -> Result<(Model, Vec<StageLog>)> {
    sequential_train_with(model, prev_valid, stages, |_, _| Ok(()))
}

/// [`sequential_train`] with a callback after every stage.
pub fn sequential_train_with<F>(
    model: &Model,
    prev_valid: &[Corpus],
    stages: &[Stage<'_>],
    mut on_stage: F,
) -> Result<(Model, Vec<StageLog>)>
where
    F: FnMut(&StageLog, &Model) -> Result<()>,
{
    if stages.is_empty() {
        return Err(Error::Empty("stage list"));
    }
    let mut current = model.clone();
    let mut proxy: Vec<Corpus> = prev_valid.to_vec();
    let mut logs = Vec::with_capacity(stages.len());
    for stage in stages {
        let method = stage.cfg.method;
        let region_spec = match (method, &stage.region) {
            (Method::Lfr, None) => {
                return Err(Error::Missing(format!("region search settings for stage `{}`", stage.name)));
            }
            (Method::Lfr, Some(r)) => Some(r),
            _ => None,
        };
        let needs_fisher = method == Method::Ewc || matches!(region_spec, Some((RegionMethod::Cm, _)));
        let mut fisher = if needs_fisher {
            Some(empirical_fisher_diag_multi(&current, &proxy)?)
        } else {
            None
        };
        let region = match region_spec {
            Some((RegionMethod::Cm, rc)) => Some(search_cm(
                &current.params,
                &current.frozen,
                fisher.as_ref().expect("computed for CM"),
                rc,
            )?),
            Some((RegionMethod::Om, rc)) => Some(search_om(&current, &proxy, rc)?.0),
            None => None,
        };
        let stats = region.as_ref().map(|r| region_stats(r, &current.params)).transpose()?;
        if stage.extend_vocab > 0 {
            let seed = rng::derive_seed(stage.cfg.seed, &format!("extend/{}", stage.name));
            current = current.extend_vocabulary(stage.extend_vocab, seed)?;
            if let Some(f) = fisher.as_mut() {
                f.extend_zeros(&current.params);
            }
        }
        let aux = TrainAux {
            fisher: fisher.as_ref(),
            region: region.as_ref(),
            prev_data: stage.retained,
            valid: stage.valid,
        };
        let theta0 = current.params.fingerprint();
        let (next, log) = train(&current, stage.train, &stage.cfg, aux)?;
        let entry = StageLog {
            name: stage.name.clone(),
            theta0,
            fisher_source: fisher.map(|f| f.source_data_id),
            region_theta0: region.map(|r| r.provenance.theta0),
            region_stats: stats,
            train: log,
        };
        on_stage(&entry, &next)?;
        logs.push(entry);
        current = next;
        proxy.extend(stage.valid.iter().cloned());
    }
    Ok((current, logs))
}
