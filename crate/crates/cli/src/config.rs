//! Experiment configuration. Every random stream of a run is derived from
//! the single top-level `seed`; seed fields inside the blocks are
//! overwritten by [`ExperimentConfig::resolved`].

use std::path::Path;
use std::str::FromStr;

use lfr_core::model::ModelConfig;
use lfr_core::region::{RegionMethod, RegionSearchConfig};
use lfr_core::tasks::{Familiarity, Sizes, WorldConfig};
use lfr_core::tensor::rng::derive_seed;
use lfr_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    DomainShift,
    LanguageAdapt,
    MixedPrevious,
    Sequential,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::DomainShift => "domain-shift",
            Scenario::LanguageAdapt => "language-adapt",
            Scenario::MixedPrevious => "mixed-previous",
            Scenario::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub src: usize,
    pub tgt: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewLanguage {
    pub familiarity: Familiarity,
    /// Base language a `related` language borrows from.
    #[serde(default)]
    pub sibling: usize,
    #[serde(default)]
    pub shared_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Token accuracy (fraction) required on previous-task validation data.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                lr: 3e-3,
                steps: 2000,
                warmup: 100,
                eval_every: 0,
                ..TrainConfig::default()
            },
            target_accuracy: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionBlock {
    pub method: RegionMethod,
    pub search: RegionSearchConfig,
}

impl Default for RegionBlock {
    fn default() -> Self {
        Self {
            method: RegionMethod::Cm,
            search: RegionSearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub world: WorldConfig,
    pub previous: Sizes,
    /// Sizes of each new task (domain or language stage), per direction.
    pub new_task: Sizes,
    pub domain_shift: Option<DomainShift>,
    /// Languages added by the language scenarios, one stage each.
    pub languages: Vec<NewLanguage>,
    /// Sentences per previous-task direction retained for mixed training.
    pub retained_per_direction: usize,
    /// Sentences per zero-shot direction (language scenarios).
    pub zero_shot_test: usize,
    /// `vocab_size` 0 takes the world's base vocabulary.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub method: TrainConfig,
    pub region: RegionBlock,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Scenario::DomainShift,
            world: WorldConfig {
                languages: 3,
                concepts: 16,
                min_len: 3,
                max_len: 6,
                zipf: 1.0,
            },
            previous: Sizes { train: 2000, valid: 100, test: 100 },
            new_task: Sizes { train: 500, valid: 100, test: 100 },
            domain_shift: Some(DomainShift { src: 1, tgt: 0, strength: 0.5 }),
            languages: Vec::new(),
            retained_per_direction: 0,
            zero_shot_test: 0,
            model: ModelConfig {
                layers: 1,
                model_dim: 32,
                ffn_dim: 64,
                heads: 2,
                vocab_size: 0,
                max_len: 10,
                dropout: 0.1,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig::default(),
            method: TrainConfig {
                lr: 3e-3,
                steps: 500,
                warmup: 50,
                eval_every: 0,
                ..TrainConfig::default()
            },
            region: RegionBlock::default(),
            output_dir: None,
        }
    }
}

/// Named seeds derived from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub world: u64,
    pub tasks: u64,
    pub model: u64,
    pub pretrain: u64,
    pub train: u64,
    pub region: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        let d = |label| derive_seed(self.seed, label);
        Seeds {
            world: d("world"),
            tasks: d("tasks"),
            model: d("model"),
            pretrain: d("pretrain"),
            train: d("train"),
            region: d("region"),
        }
    }

    /// Copy with every block seed derived from the top-level seed.
    pub fn resolved(&self) -> Self {
        let s = self.seeds();
        let mut out = self.clone();
        out.pretrain.train.seed = s.pretrain;
        out.method.seed = s.train;
        out.region.search.seed = s.region;
        if self.scenario == Scenario::MixedPrevious {
            out.method.mix_previous = true;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        match self.scenario {
            Scenario::DomainShift => {
                let Some(d) = &self.domain_shift else {
                    return usage("scenario domain-shift requires a `domain_shift` block".into());
                };
                if d.src == d.tgt || d.src >= self.world.languages || d.tgt >= self.world.languages {
                    return usage(format!("domain_shift direction {}->{} must join two base languages", d.src, d.tgt));
                }
            }
            Scenario::LanguageAdapt | Scenario::MixedPrevious => {
                if self.languages.len() != 1 {
                    return usage(format!("scenario {} requires exactly one entry in `languages`", self.scenario.as_str()));
                }
            }
            Scenario::Sequential => {
                if self.languages.is_empty() {
                    return usage("scenario sequential requires at least one entry in `languages`".into());
                }
            }
        }
        for l in &self.languages {
            if l.sibling >= self.world.languages {
                return usage(format!("sibling {} is not a base language", l.sibling));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.target_accuracy) {
            return usage(format!("target_accuracy {} outside [0, 1]", self.pretrain.target_accuracy));
        }
        if self.previous.train == 0 || self.new_task.train == 0 || self.new_task.test == 0 || self.previous.test == 0 {
            return usage("previous/new train and test sizes must be > 0".into());
        }
        self.method.validate()?;
        self.pretrain.train.validate()?;
        self.region.search.validate()?;
        Ok(())
    }
}

/// Hyper-parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    /// CM relative width.
    Lambda,
    /// CM fixed percentage.
    Rho,
    /// OM expansion weight.
    OmAlpha,
    /// Penalty / distillation weight of L2, EWC and KD.
    Alpha,
    Lr,
    Steps,
    Temperature,
}

impl Knob {
    pub const ALL: [Knob; 7] = [Knob::Lambda, Knob::Rho, Knob::OmAlpha, Knob::Alpha, Knob::Lr, Knob::Steps, Knob::Temperature];

    pub fn as_str(self) -> &'static str {
        match self {
            Knob::Lambda => "lambda",
            Knob::Rho => "rho",
            Knob::OmAlpha => "om_alpha",
            Knob::Alpha => "alpha",
            Knob::Lr => "lr",
            Knob::Steps => "steps",
            Knob::Temperature => "temperature",
        }
    }

    /// Checks that the knob affects the configured method.
    pub fn check(self, cfg: &ExperimentConfig) -> Result<()> {
        let m = cfg.method.method;
        let ok = match self {
            Knob::Lambda | Knob::Rho => m == Method::Lfr && cfg.region.method == RegionMethod::Cm,
            Knob::OmAlpha => m == Method::Lfr && cfg.region.method == RegionMethod::Om,
            Knob::Alpha => matches!(m, Method::L2 | Method::Ewc | Method::Kd),
            Knob::Lr | Knob::Steps => true,
            Knob::Temperature => m == Method::MixedFt || cfg.method.mix_previous || cfg.scenario == Scenario::MixedPrevious,
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Usage(format!("knob `{}` has no effect on method {m}", self.as_str())))
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(CliError::Usage(format!("knob value {value} is not finite")));
        }
        match self {
            Knob::Lambda => cfg.region.search.lambda = value,
            Knob::Rho => cfg.region.search.rho = value,
            Knob::OmAlpha => cfg.region.search.alpha = value,
            Knob::Alpha => cfg.method.alpha = Some(value),
            Knob::Lr => cfg.method.lr = value,
            Knob::Steps => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(CliError::Usage(format!("steps must be a whole number, got {value}")));
                }
                cfg.method.steps = value as usize;
            }
            Knob::Temperature => cfg.method.temperature = value,
        }
        cfg.validate()
    }
}

impl FromStr for Knob {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Knob::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| CliError::Usage(format!("unknown knob `{s}`")))
    }
}
