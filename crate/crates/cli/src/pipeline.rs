//! Commands of the experiment runner. Each command opens the output
//! directory as a [`Workspace`], so every file it touches is recorded in
//! the manifest.

use std::collections::BTreeMap;
use std::sync::mpsc;

use lfr_core::eval::{evaluate_suite, token_accuracy, translate_corpus, EvalReport, Metric, Role, RunInfo, SuiteEntry};
use lfr_core::fisher::empirical_fisher_diag_multi;
use lfr_core::model::Model;
use lfr_core::region::{region_stats, search_cm, search_om, RegionMethod, RegionStats};
use lfr_core::tasks::{gen_domain_shift, gen_previous_task, language_task, zero_shot_task, Corpus, Direction, Sizes, TaskData, TaskSpec, World};
use lfr_core::tensor::rng::derive_seed;
use lfr_core::trainer::{sequential_train_with, train, train_with_state, Method, Stage, StageLog, TrainAux};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint, VocabTable};
use crate::config::{ExperimentConfig, Knob, RegionBlock, Scenario};
use crate::error::{CliError, Result, StageContext};
use crate::results::{parse_rows, scatter_svg, train_log_csv, upsert, write_rows, ResultRow};
use crate::workspace::{Manifest, Workspace, PREVIOUS_TRAIN};

pub const PRETRAINED: &str = "pretrained.ckpt";
/// Pretrained model plus Fisher and region sections added by `search-region`.
pub const REGIONS: &str = "regions.ckpt";
pub const BASELINE: &str = "reports/baseline.json";
pub const RESULTS: &str = "results.csv";
const INDEX: &str = "data/index.json";
const REPORT_KEY: &str = "report:all";

/// Stage names in training order and whether retained data exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIndex {
    pub scenario: Scenario,
    pub stages: Vec<String>,
    pub retained: bool,
    pub zero_shot: Vec<String>,
}

/// One adaptation task's corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub name: String,
    pub train: Vec<Corpus>,
    pub valid: Vec<Corpus>,
    pub test: Vec<Corpus>,
    pub zero: Vec<Corpus>,
}

/// Everything a scenario needs. `prev.train` is held only in memory.
pub struct ScenarioData {
    pub world: World,
    pub prev: TaskData,
    pub stages: Vec<StageData>,
    pub retained: Vec<Corpus>,
}

fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))
}

/// Hash of the resolved config, independent of where outputs go.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.resolved();
    c.output_dir = None;
    hash_json(&c)
}

/// Hash of the parts of the config that pretraining depends on.
pub fn pretrain_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.resolved();
    c.output_dir = None;
    c.method = Default::default();
    c.region = RegionBlock::default();
    hash_json(&c)
}

/// Generates the world, the previous task and every new-task corpus.
pub fn build_data(cfg: &ExperimentConfig) -> Result<ScenarioData> {
    let seeds = cfg.seeds();
    let (mut world, prev) = gen_previous_task(seeds.world, cfg.world.clone(), cfg.previous)?;
    let mut specs: Vec<(TaskSpec, Option<TaskSpec>)> = Vec::new();
    match cfg.scenario {
        Scenario::DomainShift => {
            let d = cfg.domain_shift.as_ref().ok_or_else(|| CliError::Usage("missing domain_shift block".into()))?;
            specs.push((gen_domain_shift(&world, Direction::new(d.src, d.tgt), seeds.tasks, d.strength, cfg.new_task)?, None));
        }
        _ => {
            for l in &cfg.languages {
                let idx = world.add_language(seeds.world, l.familiarity, l.sibling, l.shared_fraction)?;
                let zero = (cfg.zero_shot_test > 0)
                    .then(|| zero_shot_task(&world, idx, seeds.tasks, cfg.zero_shot_test))
                    .transpose()?;
                specs.push((language_task(&world, idx, seeds.tasks, cfg.new_task)?, zero));
            }
        }
    }
    let mut stages = Vec::new();
    for (spec, zero) in specs {
        let d = world.generate_task(&spec)?;
        let zero = match zero {
            Some(z) => world.generate_task(&z)?.test,
            None => Vec::new(),
        };
        stages.push(StageData {
            name: spec.name.clone(),
            train: d.train,
            valid: d.valid,
            test: d.test,
            zero,
        });
    }
    let retained = if cfg.retained_per_direction > 0 {
        let spec = TaskSpec {
            name: "retained".into(),
            directions: world.previous_directions(),
            domain: world.base_domain.clone(),
            sizes: Sizes { train: cfg.retained_per_direction, valid: 0, test: 0 },
            seed: derive_seed(seeds.tasks, "retained"),
        };
        world.generate_task(&spec)?.train
    } else {
        Vec::new()
    };
    Ok(ScenarioData { world, prev, stages, retained })
}

fn max_token(corpora: &[&[Corpus]]) -> usize {
    corpora
        .iter()
        .flat_map(|cs| cs.iter())
        .flat_map(|c| &c.pairs)
        .flat_map(|p| p.src.iter().chain(&p.tgt))
        .copied()
        .max()
        .map_or(0, |m| m as usize)
}

/// Vocabulary a stage needs.
fn stage_vocab(s: &StageData) -> usize {
    max_token(&[&s.train, &s.valid, &s.test, &s.zero]) + 1
}

/// Pooled token accuracy (fraction) of greedy translations.
pub fn pooled_accuracy(model: &Model, corpora: &[Corpus]) -> Result<f64> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for c in corpora {
        hyps.extend(translate_corpus(model, c)?);
        refs.extend(c.pairs.iter().map(|p| p.tgt[1..].to_vec()));
    }
    Ok(token_accuracy(&hyps, &refs)?)
}

/// Previous-task test sets plus every stage the model's vocabulary covers.
fn suite<'a>(model: &Model, prev_test: &'a [Corpus], stages: &'a [StageData]) -> Vec<SuiteEntry<'a>> {
    let mut out = vec![SuiteEntry { role: Role::Previous, corpora: prev_test }];
    for s in stages.iter().filter(|s| stage_vocab(s) <= model.vocab_size()) {
        out.push(SuiteEntry { role: Role::New, corpora: &s.test });
        if !s.zero.is_empty() {
            out.push(SuiteEntry { role: Role::ZeroShot, corpora: &s.zero });
        }
    }
    out
}

pub fn run_info(cfg: &ExperimentConfig) -> RunInfo {
    let m = &cfg.method;
    let mut hyper = BTreeMap::from([("lr".to_string(), m.lr), ("steps".to_string(), m.steps as f64)]);
    match m.method {
        Method::L2 | Method::Ewc | Method::Kd => {
            hyper.insert("alpha".into(), m.alpha());
        }
        Method::Lfr => match cfg.region.method {
            RegionMethod::Cm => {
                hyper.insert("rho".into(), cfg.region.search.rho);
                hyper.insert("lambda".into(), cfg.region.search.lambda);
            }
            RegionMethod::Om => {
                hyper.insert("om_alpha".into(), cfg.region.search.alpha);
                hyper.insert("om_lr".into(), cfg.region.search.om_lr);
                hyper.insert("om_steps".into(), cfg.region.search.om_steps as f64);
            }
        },
        _ => {}
    }
    if m.method == Method::MixedFt || m.mix_previous {
        hyper.insert("temperature".into(), m.temperature);
    }
    let method = match m.method {
        Method::Lfr => format!("LFR-{}", cfg.region.method),
        other => other.as_str().to_string(),
    };
    RunInfo { method, hyper, seed: cfg.seed }
}

/// Default run name: method, plus region method for LFR.
pub fn run_name(cfg: &ExperimentConfig) -> String {
    run_info(cfg).method.to_ascii_lowercase().replace('_', "-")
}

/// Checkpoint commands start from when none is given: the region
/// checkpoint if one exists, else the pretrained model.
pub fn default_checkpoint(root: &std::path::Path) -> &'static str {
    if root.join(REGIONS).exists() {
        REGIONS
    } else {
        PRETRAINED
    }
}

fn package(model: Model, world: &World) -> Checkpoint {
    let size = model.vocab_size();
    Checkpoint::plain(model, VocabTable::for_world(world, size))
}

fn stage_file(stage: &str, split: &str) -> String {
    format!("data/{stage}.{split}.json")
}

/// Data written by pretraining, read back by later commands.
struct Loaded {
    index: DataIndex,
    world: World,
    prev_valid: Vec<Corpus>,
    prev_test: Vec<Corpus>,
    stages: Vec<StageData>,
    retained: Vec<Corpus>,
}

fn load(ws: &mut Workspace, need_retained: bool) -> Result<Loaded> {
    let index: DataIndex = ws.read_json(INDEX)?;
    let world: World = ws.read_json("world.json")?;
    let prev_valid = ws.read_json("data/prev.valid.json")?;
    let prev_test = ws.read_json("data/prev.test.json")?;
    let mut stages = Vec::new();
    for name in &index.stages {
        stages.push(StageData {
            name: name.clone(),
            train: ws.read_json(&stage_file(name, "train"))?,
            valid: ws.read_json(&stage_file(name, "valid"))?,
            test: ws.read_json(&stage_file(name, "test"))?,
            zero: if index.zero_shot.contains(name) {
                ws.read_json(&stage_file(name, "zero"))?
            } else {
                Vec::new()
            },
        });
    }
    let retained = if need_retained && index.retained {
        ws.read_json("data/retained.json")?
    } else {
        Vec::new()
    };
    Ok(Loaded { index, world, prev_valid, prev_test, stages, retained })
}

fn read_baseline(ws: &mut Workspace) -> Result<EvalReport> {
    let b: EvalReport = ws.read_json(BASELINE)?;
    Ok(b)
}

fn record_result(ws: &mut Workspace, row: ResultRow) -> Result<()> {
    let mut rows = if ws.exists(RESULTS) {
        let text = std::fs::read_to_string(ws.path(RESULTS)).map_err(|e| CliError::io(&ws.path(RESULTS), e))?;
        parse_rows(&text)?
    } else {
        Vec::new()
    };
    upsert(&mut rows, row);
    ws.write_bytes(RESULTS, &write_rows(&rows)?)
}

fn mixes(cfg: &ExperimentConfig) -> bool {
    cfg.method.method == Method::MixedFt || cfg.method.mix_previous
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checksum: String,
    pub baseline: EvalReport,
    pub valid_accuracy: f64,
    /// False when an up-to-date pretrained checkpoint was reused.
    pub trained: bool,
}

/// Trains the starting model on the previous task and materializes every
/// other corpus of the scenario. The previous-task training corpus is never
/// written.
pub fn pretrain(cfg: &ExperimentConfig, root: &std::path::Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let hash = pretrain_hash(&cfg);
    let mut ws = Workspace::open(root, "pretrain", "base", &hash)?;
    let data = build_data(&cfg)?;
    ws.note_ephemeral(PREVIOUS_TRAIN);
    let mut mc = cfg.model.clone();
    if mc.vocab_size == 0 {
        mc.vocab_size = data.world.base_vocab;
    }
    let model = Model::new(mc, cfg.seeds().model)?;
    let aux = TrainAux { valid: &data.prev.valid, ..TrainAux::default() };
    let (model, log) = train(&model, &data.prev.train, &cfg.pretrain.train, aux)?;
    let acc = pooled_accuracy(&model, &data.prev.valid)?;
    if acc < cfg.pretrain.target_accuracy {
        return Err(CliError::Runtime(format!(
            "pretraining reached token accuracy {acc:.4} on previous-task validation data, below the target {} after {} steps",
            cfg.pretrain.target_accuracy, cfg.pretrain.train.steps
        )));
    }
    let ScenarioData { world, prev, stages, retained } = data;
    let TaskData { valid: prev_valid, test: prev_test, .. } = prev;

    ws.write_json("config.json", &cfg)?;
    ws.write_json("world.json", &world)?;
    let index = DataIndex {
        scenario: cfg.scenario,
        stages: stages.iter().map(|s| s.name.clone()).collect(),
        retained: !retained.is_empty(),
        zero_shot: stages.iter().filter(|s| !s.zero.is_empty()).map(|s| s.name.clone()).collect(),
    };
    ws.write_json(INDEX, &index)?;
    ws.write_json("data/prev.valid.json", &prev_valid)?;
    ws.write_json("data/prev.test.json", &prev_test)?;
    for s in &stages {
        ws.write_json(&stage_file(&s.name, "train"), &s.train)?;
        ws.write_json(&stage_file(&s.name, "valid"), &s.valid)?;
        ws.write_json(&stage_file(&s.name, "test"), &s.test)?;
        if !s.zero.is_empty() {
            ws.write_json(&stage_file(&s.name, "zero"), &s.zero)?;
        }
    }
    if !retained.is_empty() {
        ws.write_json("data/retained.json", &retained)?;
    }
    let ckpt = package(model, &world);
    let checksum = ws.write_checkpoint(PRETRAINED, &ckpt)?;
    ws.write_bytes("logs/pretrain.csv", &train_log_csv(&log)?)?;
    let run = RunInfo {
        method: "PRETRAINED".into(),
        hyper: BTreeMap::new(),
        seed: cfg.seed,
    };
    let baseline = {
        let stage_refs = suite(&ckpt.model, &prev_test, &stages);
        let b = evaluate_suite(&ckpt.model, &stage_refs, run, None)?;
        EvalReport::from_directions(b.run.clone(), b.directions.clone(), Some(&b))
    };
    ws.write_json(BASELINE, &baseline)?;
    ws.finish()?;
    Ok(PretrainOutcome {
        checksum,
        baseline,
        valid_accuracy: acc,
        trained: true,
    })
}

/// Runs [`pretrain`] unless the workspace already holds a pretrained
/// checkpoint produced from the same pretraining config.
pub fn ensure_pretrained(cfg: &ExperimentConfig, root: &std::path::Path) -> Result<PretrainOutcome> {
    let ws = Workspace::open(root, "probe", "probe", "")?;
    let fresh = ws.recorded_config(PRETRAINED) == Some(pretrain_hash(cfg).as_str())
        && ws.exists(PRETRAINED)
        && ws.exists(BASELINE);
    if fresh {
        ws.verify()?;
        let baseline: EvalReport = serde_json::from_slice(&std::fs::read(ws.path(BASELINE)).map_err(|e| CliError::io(&ws.path(BASELINE), e))?)
            .map_err(|e| CliError::format(&ws.path(BASELINE), e.to_string()))?;
        let checksum = ws.manifest().artifacts[PRETRAINED].sha256.clone();
        return Ok(PretrainOutcome {
            checksum,
            baseline,
            valid_accuracy: f64::NAN,
            trained: false,
        });
    }
    pretrain(cfg, root)
}

/// Computes an update region from previous-task validation data and adds
/// it (and, for CM, the Fisher diagonal) to a checkpoint.
pub fn search_region(
    cfg: &ExperimentConfig,
    root: &std::path::Path,
    ckpt_in: &str,
    method: RegionMethod,
    tag: &str,
    ckpt_out: &str,
) -> Result<RegionStats> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut ws = Workspace::open(root, "search-region", tag, &config_hash(&cfg))?;
    let mut ckpt = ws.read_checkpoint(ckpt_in)?;
    if !ws.exists("data/prev.valid.json") {
        return Err(CliError::Usage(format!(
            "missing previous-task validation data `data/prev.valid.json` in {} (run `lfr pretrain` first)",
            root.display()
        )));
    }
    let valid: Vec<Corpus> = ws.read_json("data/prev.valid.json")?;
    let rc = &cfg.region.search;
    let region = match method {
        RegionMethod::Cm => {
            let fisher = empirical_fisher_diag_multi(&ckpt.model, &valid)?;
            let r = search_cm(&ckpt.model.params, &ckpt.model.frozen, &fisher, rc)?;
            ckpt.fisher = Some(fisher);
            r
        }
        RegionMethod::Om => {
            let (r, log) = search_om(&ckpt.model, &valid, rc)?;
            let mut csv = String::from("step,kl,penalty\n");
            for (i, (k, p)) in log.kl.iter().zip(&log.penalty).enumerate() {
                csv.push_str(&format!("{},{k},{p}\n", i + 1));
            }
            ws.write_bytes(&format!("logs/om-{tag}.csv"), csv.as_bytes())?;
            r
        }
    };
    let stats = region_stats(&region, &ckpt.model.params)?;
    ckpt.regions.insert(tag.to_string(), region);
    ws.write_checkpoint(ckpt_out, &ckpt)?;
    ws.write_json(&format!("reports/region-{tag}.json"), &stats)?;
    ws.finish()?;
    Ok(stats)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub ckpt: String,
    /// Region tag for LFR; defaults to the configured region method.
    pub region_tag: Option<String>,
    /// Stage to train on; defaults to the first.
    pub stage: Option<String>,
    pub name: Option<String>,
    /// Output checkpoint; defaults to `checkpoints/<name>.ckpt`.
    pub save: Option<String>,
    pub save_optimizer: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub checksum: String,
    pub report: EvalReport,
}

fn missing(what: String) -> CliError {
    CliError::Usage(what)
}

/// Trains one stage from a checkpoint with the configured method.
pub fn train_stage(cfg: &ExperimentConfig, root: &std::path::Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let run_id = opts.name.clone().unwrap_or_else(|| run_name(&cfg));
    let mut ws = Workspace::open(root, "train", &run_id, &config_hash(&cfg))?;
    let ckpt = ws.read_checkpoint(&opts.ckpt)?;
    let data = load(&mut ws, mixes(&cfg))?;
    let stage_name = opts.stage.clone().unwrap_or_else(|| data.index.stages[0].clone());
    let stage = data
        .stages
        .iter()
        .find(|s| s.name == stage_name)
        .ok_or_else(|| CliError::Usage(format!("unknown stage `{stage_name}` (have {:?})", data.index.stages)))?;
    let mut model = ckpt.model.clone();
    let needed = stage_vocab(stage);
    if needed > model.vocab_size() {
        let seed = derive_seed(cfg.method.seed, &format!("extend/{}", stage.name));
        model = model.extend_vocabulary(needed - model.vocab_size(), seed)?;
    }
    let fisher = match cfg.method.method {
        Method::Ewc => {
            let mut f = ckpt.fisher.clone().ok_or_else(|| {
                missing(format!(
                    "checkpoint `{}` has no Fisher section (required by EWC; run `lfr search-region --method cm` first)",
                    opts.ckpt
                ))
            })?;
            f.extend_zeros(&model.params);
            Some(f)
        }
        _ => None,
    };
    let region = match cfg.method.method {
        Method::Lfr => {
            let tag = opts
                .region_tag
                .clone()
                .unwrap_or_else(|| cfg.region.method.to_string().to_ascii_lowercase());
            Some(ckpt.regions.get(&tag).cloned().ok_or_else(|| {
                missing(format!(
                    "checkpoint `{}` has no region section `{tag}` (required by LFR; run `lfr search-region` first)",
                    opts.ckpt
                ))
            })?)
        }
        _ => None,
    };
    let aux = TrainAux {
        fisher: fisher.as_ref(),
        region: region.as_ref(),
        prev_data: &data.retained,
        valid: &stage.valid,
    };
    let (trained, log, state) = train_with_state(&model, &stage.train, &cfg.method, aux)?;
    let mut out = package(trained, &data.world);
    if opts.save_optimizer {
        out.optimizer = Some(state);
    }
    let baseline = read_baseline(&mut ws)?;
    let report = evaluate_suite(&out.model, &suite(&out.model, &data.prev_test, &data.stages), run_info(&cfg), Some(&baseline))?;
    let save = opts.save.clone().unwrap_or_else(|| format!("checkpoints/{run_id}.ckpt"));
    let checksum = ws.write_checkpoint(&save, &out)?;
    ws.write_bytes(&format!("logs/{run_id}.csv"), &train_log_csv(&log)?)?;
    ws.write_json(&format!("reports/{run_id}.json"), &report)?;
    record_result(&mut ws, ResultRow::from_report(&run_id, &stage.name, None, &report))?;
    ws.finish()?;
    Ok(TrainOutcome { run_id, checksum, report })
}

/// Evaluates a checkpoint against the baseline report.
pub fn evaluate(cfg: &ExperimentConfig, root: &std::path::Path, ckpt: &str, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut ws = Workspace::open(root, "evaluate", name, &config_hash(&cfg))?;
    let c = ws.read_checkpoint(ckpt)?;
    let data = load(&mut ws, false)?;
    let baseline = read_baseline(&mut ws)?;
    let run = RunInfo {
        method: name.to_string(),
        hyper: BTreeMap::new(),
        seed: cfg.seed,
    };
    let report = evaluate_suite(&c.model, &suite(&c.model, &data.prev_test, &data.stages), run, Some(&baseline))?;
    ws.write_json(&format!("reports/eval-{name}.json"), &report)?;
    ws.finish()?;
    Ok(report)
}

fn build_stages<'a>(cfg: &ExperimentConfig, start_vocab: usize, stages: &'a [StageData], retained: &'a [Corpus]) -> Vec<Stage<'a>> {
    let mut vocab = start_vocab;
    stages
        .iter()
        .map(|s| {
            let needed = stage_vocab(s).max(vocab);
            let extend = needed - vocab;
            vocab = needed;
            Stage {
                name: s.name.clone(),
                train: &s.train,
                valid: &s.valid,
                cfg: cfg.method.clone(),
                region: (cfg.method.method == Method::Lfr).then(|| (cfg.region.method, cfg.region.search.clone())),
                extend_vocab: extend,
                retained: if mixes(cfg) { retained } else { &[] },
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub run_id: String,
    pub pretrained: String,
    /// Checkpoint checksum after each stage.
    pub checksums: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub stages: Vec<StageLog>,
}

/// Full pipeline: pretraining, then for each stage region search, training
/// and evaluation.
pub fn scenario(cfg: &ExperimentConfig, root: &std::path::Path) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let pre = ensure_pretrained(cfg, root).stage("pretrain")?;
    let cfg = cfg.resolved();
    let run_id = format!("{}-{}", cfg.scenario.as_str(), run_name(&cfg));
    let mut ws = Workspace::open(root, "scenario", &run_id, &config_hash(&cfg))?;
    let ckpt = ws.read_checkpoint(PRETRAINED).stage("load")?;
    let data = load(&mut ws, mixes(&cfg)).stage("load")?;
    let baseline = read_baseline(&mut ws)?;
    let stages = build_stages(&cfg, ckpt.model.vocab_size(), &data.stages, &data.retained);
    let mut finished: Vec<(StageLog, Model)> = Vec::new();
    let (_, logs) = sequential_train_with(&ckpt.model, &data.prev_valid, &stages, |log, m| {
        finished.push((log.clone(), m.clone()));
        Ok(())
    })
    .stage(&format!("stage {}", finished_label(&stages, 0)))?;
    let mut checksums = Vec::new();
    let mut reports = Vec::new();
    for (log, model) in finished {
        let label = log.name.clone();
        let report = evaluate_suite(&model, &suite(&model, &data.prev_test, &data.stages), run_info(&cfg), Some(&baseline))
            .stage(&format!("stage {label}: evaluate"))?;
        let out = package(model, &data.world);
        checksums.push(ws.write_checkpoint(&format!("checkpoints/{run_id}/{label}.ckpt"), &out)?);
        ws.write_bytes(&format!("logs/{run_id}/{label}.csv"), &train_log_csv(&log.train)?)?;
        ws.write_json(&format!("reports/{run_id}/{label}.json"), &report)?;
        record_result(&mut ws, ResultRow::from_report(&run_id, &label, None, &report))?;
        reports.push(report);
    }
    ws.write_json(&format!("logs/{run_id}/stages.json"), &logs)?;
    ws.finish()?;
    Ok(ScenarioOutcome {
        run_id,
        pretrained: pre.checksum,
        checksums,
        reports,
        stages: logs,
    })
}

fn finished_label(stages: &[Stage<'_>], i: usize) -> String {
    if stages.len() == 1 {
        stages[i].name.clone()
    } else {
        "sequence".into()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    /// Values trained in this invocation (the rest were already done).
    pub computed: Vec<f64>,
    pub csv: String,
    pub svg: String,
}

fn sweep_hash(cfg: &ExperimentConfig, knob: Knob, values: &[f64]) -> String {
    hash_json(&(config_hash(cfg), knob, values))
}

/// Trains the first stage once per knob value, in parallel. Rows are
/// appended through one writer as workers finish; values already present
/// in the sweep table are skipped.
pub fn sweep(cfg: &ExperimentConfig, root: &std::path::Path, knob: Knob, values: &[f64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    cfg.validate()?;
    knob.check(cfg)?;
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        knob.apply(&mut c, v)?;
        configs.push((v, c.resolved()));
    }
    ensure_pretrained(cfg, root).stage("pretrain")?;
    let base = cfg.resolved();
    let name = format!("{}-{}", run_name(&base), knob.as_str());
    let mut ws = Workspace::open(root, "sweep", &name, &sweep_hash(cfg, knob, values))?;
    let ckpt = ws.read_checkpoint(PRETRAINED)?;
    let data = load(&mut ws, mixes(&base))?;
    let baseline = read_baseline(&mut ws)?;
    let csv_path = format!("sweeps/{name}.csv");
    let mut rows = if ws.exists(&csv_path) {
        let text = std::fs::read_to_string(ws.path(&csv_path)).map_err(|e| CliError::io(&ws.path(&csv_path), e))?;
        parse_rows(&text)?
    } else {
        Vec::new()
    };
    let done = |v: f64, rows: &[ResultRow]| rows.iter().any(|r| r.knob_value.map(f64::to_bits) == Some(v.to_bits()));
    let todo: Vec<(f64, ExperimentConfig)> = configs.into_iter().filter(|(v, _)| !done(*v, &rows)).collect();
    let computed: Vec<f64> = todo.iter().map(|(v, _)| *v).collect();
    let first = &data.stages[..1];
    let run_point = |c: &ExperimentConfig| -> Result<EvalReport> {
        let stages = build_stages(c, ckpt.model.vocab_size(), first, &data.retained);
        let (m, _) = sequential_train_with(&ckpt.model, &data.prev_valid, &stages, |_, _| Ok(()))?;
        Ok(evaluate_suite(&m, &suite(&m, &data.prev_test, first), run_info(c), Some(&baseline))?)
    };
    let (tx, rx) = mpsc::channel::<(f64, Result<EvalReport>)>();
    let mut failure = None;
    std::thread::scope(|s| {
        s.spawn(|| {
            todo.par_iter().for_each_with(tx, |tx, (v, c)| {
                let _ = tx.send((*v, run_point(c)));
            });
        });
        for (v, res) in rx {
            match res {
                Ok(report) => {
                    let id = format!("{name}={v}");
                    let row = ResultRow::from_report(&id, &first[0].name, Some((knob.as_str(), v)), &report);
                    rows.push(row);
                    let written = write_rows(&rows).and_then(|b| ws.write_bytes(&csv_path, &b));
                    let report_written = ws.write_json(&format!("reports/sweep/{name}={v}.json"), &report);
                    if let Err(e) = written.and(report_written) {
                        failure.get_or_insert(e);
                    }
                }
                Err(e) => {
                    failure.get_or_insert(CliError::Stage {
                        stage: format!("{} = {v}", knob.as_str()),
                        source: Box::new(e),
                    });
                }
            }
        }
    });
    if let Some(e) = failure {
        ws.finish()?;
        return Err(e);
    }
    rows.sort_by(|a, b| a.knob_value.unwrap_or(f64::NAN).total_cmp(&b.knob_value.unwrap_or(f64::NAN)));
    let csv = String::from_utf8(write_rows(&rows)?).expect("csv is utf-8");
    ws.write_bytes(&csv_path, csv.as_bytes())?;
    let svg = scatter_svg(&rows, Metric::Accuracy, &format!("{} sweep over {}", base.method.method, knob.as_str()));
    ws.write_bytes(&format!("sweeps/{name}.svg"), svg.as_bytes())?;
    ws.finish()?;
    Ok(SweepOutcome { rows, computed, csv, svg })
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub markdown: String,
    pub svg: String,
    pub audit: std::result::Result<(), String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Verifies the manifest, audits data access and summarizes every result
/// table into a markdown table and a trade-off plot.
pub fn report(root: &std::path::Path, metric: Metric) -> Result<ReportOutcome> {
    let mut ws = Workspace::open(root, "report", "all", "report")?;
    // the report's own outputs are excluded from what it summarizes
    ws.verify()?;
    let manifest: Manifest = ws.manifest().clone();
    let mut tables: Vec<String> = manifest
        .artifacts
        .keys()
        .filter(|k| k.as_str() == RESULTS || (k.starts_with("sweeps/") && k.ends_with(".csv")))
        .cloned()
        .collect();
    tables.sort();
    let mut rows = Vec::new();
    for t in &tables {
        let bytes = ws.read_bytes(t)?;
        rows.extend(parse_rows(&String::from_utf8_lossy(&bytes))?);
    }
    let mut md = String::from("| run | stage | method | knob | prev BLEU | prev acc | new BLEU | new acc | avg BLEU | avg acc | zero-shot BLEU | forgetting (acc) |\n|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let knob = r.knob_value.map(|v| format!("{}={v}", r.knob)).unwrap_or_default();
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run_id,
            r.stage,
            r.method,
            knob,
            fmt_opt(r.prev_bleu),
            fmt_opt(r.prev_acc),
            fmt_opt(r.new_bleu),
            fmt_opt(r.new_acc),
            fmt_opt(r.avg_bleu),
            fmt_opt(r.avg_acc),
            fmt_opt(r.zero_bleu),
            fmt_opt(r.forget_acc)
        ));
    }
    let audit = manifest.audit_previous_train();
    md.push_str(&format!(
        "\nArtifacts: {}. Previous-task training data audit: {}.\n",
        manifest.artifacts.values().filter(|a| a.command != REPORT_KEY).count(),
        match &audit {
            Ok(()) => "passed".to_string(),
            Err(e) => format!("FAILED ({e})"),
        }
    ));
    let svg = scatter_svg(&rows, metric, "previous vs new task");
    ws.write_bytes("report.md", md.as_bytes())?;
    ws.write_bytes("plots/tradeoff.svg", svg.as_bytes())?;
    ws.finish()?;
    Ok(ReportOutcome { markdown: md, svg, audit })
}
