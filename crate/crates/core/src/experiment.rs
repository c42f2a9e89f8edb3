//! Run configuration files and end-to-end execution of one run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{synthesize, Dataset, LongTailProfile, ShotSplit};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, SplitAccuracy};
use crate::losses::{DistillConfig, DistillMode, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TEMPERATURE};
use crate::model::{Model, ModelSpec, DEFAULT_GAMMA, DEFAULT_WIDTHS};
use crate::rng::RNG_ALGORITHM;
use crate::sampling::SamplingKind;
use crate::train::{
    default_composition, ensemble_predict, Method, PlanOutcome, StagePlan, TeacherKind,
    TeacherSpec, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_FINETUNE_EPOCHS,
    DEFAULT_LR0, DEFAULT_MOMENTUM, FINETUNE_LR_FRACTION,
};

/// Contents of a run configuration file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs_stage1: usize,
    /// Defaults to 10 for fine-tuning and to `epochs_stage1` otherwise.
    #[serde(default)]
    pub epochs_stage2: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(rename = "K", default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub teacher_types: Option<Vec<TeacherKind>>,
    #[serde(default = "default_augment_sigma")]
    pub augment_sigma: f64,
    /// Directory holding `train.csv` and `test.csv`, relative to the config
    /// file.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub profile: Option<LongTailProfile>,
    /// Defaults to 60% / 20% of the largest training class.
    #[serde(default)]
    pub split_thresholds: Option<ShotSplit>,
    /// Distillation objective for `cbd`: feature (default), classifier or
    /// hybrid.
    #[serde(default)]
    pub distill_mode: Option<DistillMode>,
    /// Stage-2 learning rate; defaults to `lr0/20` for fine-tuning and `lr0`
    /// otherwise.
    #[serde(default)]
    pub lr_stage2: Option<f64>,
    /// Extractor widths, the last being the descriptor width.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_lr0() -> f64 {
    DEFAULT_LR0
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_augment_sigma() -> f64 {
    crate::data::DEFAULT_AUGMENT_SIGMA
}

impl RunConfig {
    /// Minimal configuration for `method` on the synthetic benchmark.
    pub fn benchmark(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            seed,
            epochs_stage1: DEFAULT_EPOCHS,
            epochs_stage2: None,
            batch_size: DEFAULT_BATCH_SIZE,
            lr0: DEFAULT_LR0,
            momentum: DEFAULT_MOMENTUM,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            gamma: DEFAULT_GAMMA,
            k: None,
            teacher_types: None,
            augment_sigma: crate::data::DEFAULT_AUGMENT_SIGMA,
            dataset_path: None,
            profile: Some(LongTailProfile::benchmark(seed)),
            split_thresholds: None,
            distill_mode: None,
            lr_stage2: None,
            widths: None,
        }
    }

    /// Parses TOML text, applying `key=value` overrides first. Override
    /// values are TOML literals; anything that does not parse as one is taken
    /// as a string. Dotted keys reach into tables (`profile.seed=3`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error(&e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| config_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative `dataset_path` is resolved against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(p) = &cfg.dataset_path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset_path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if let Some(lr) = self.lr_stage2 {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!(
                    "lr_stage2 must be non-negative, got {lr}"
                )));
            }
        }
        if self.epochs_stage2 == Some(0) {
            return Err(Error::Config("epochs_stage2 must be at least 1".into()));
        }
        if matches!(&self.widths, Some(w) if w.is_empty() || w.contains(&0)) {
            return Err(Error::Config(
                "widths must be a non-empty list of positive sizes".into(),
            ));
        }
        match (&self.dataset_path, &self.profile) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give dataset_path or profile, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "config needs dataset_path or a [profile] table".into(),
                ))
            }
            (None, Some(p)) => p.validate()?,
            _ => {}
        }
        if let Some(s) = &self.split_thresholds {
            s.validate()?;
        }
        if let Some(mode) = self.distill_mode {
            let ok = match self.method {
                Method::Cbd => !matches!(mode, DistillMode::Ensemble | DistillMode::None),
                Method::CbdK => mode == DistillMode::Ensemble,
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "distill_mode {mode} does not apply to {}",
                    self.method
                )));
            }
        }
        let k = self.teacher_kinds()?.len();
        let fits = match self.method {
            Method::CbdK => k >= 1,
            Method::TeacherEnsemble => k >= 2,
            _ => k == 1,
        };
        if !fits {
            return Err(Error::Config(format!(
                "{} cannot use {k} teacher(s); cbd and single-model methods take exactly 1, \
                 teacher_ensemble at least 2",
                self.method
            )));
        }
        self.distill_config().validate()?;
        Ok(())
    }

    /// Teacher types after filling in defaults for `K` and `teacher_types`.
    pub fn teacher_kinds(&self) -> Result<Vec<TeacherKind>> {
        let kinds = match (&self.teacher_types, self.k) {
            (Some(t), Some(k)) if t.len() != k => {
                return Err(Error::Config(format!(
                    "K = {k} but teacher_types lists {}",
                    t.len()
                )))
            }
            (Some(t), _) => t.clone(),
            (None, Some(k)) => match self.method {
                Method::Cbd
                | Method::Instance
                | Method::ClassBalanced
                | Method::Crt
                | Method::Finetune => {
                    vec![TeacherKind::Standard; k]
                }
                Method::CbdK | Method::TeacherEnsemble => default_composition(k),
            },
            (None, None) => match self.method {
                Method::CbdK | Method::TeacherEnsemble => default_composition(4),
                _ => vec![TeacherKind::Standard],
            },
        };
        if kinds.is_empty() {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(kinds)
    }

    pub fn distill_config(&self) -> DistillConfig {
        let mode = match self.method {
            Method::Cbd => self.distill_mode.unwrap_or(DistillMode::Feature),
            Method::CbdK => DistillMode::Ensemble,
            _ => DistillMode::None,
        };
        DistillConfig {
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            mode,
            k: self
                .teacher_types
                .as_ref()
                .map_or(self.k.unwrap_or(1), Vec::len)
                .max(1),
        }
    }

    /// Loads or synthesizes the `(train, test)` pair.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        if let Some(p) = &self.profile {
            return synthesize(p);
        }
        let dir = self.dataset_path.as_ref().ok_or_else(|| {
            Error::Config("config needs dataset_path or a [profile] table".into())
        })?;
        let train = Dataset::load(dir.join("train.csv"))?;
        let test = Dataset::load_with_classes(dir.join("test.csv"), train.num_classes())?;
        if test.num_classes() != train.num_classes() || test.dim() != train.dim() {
            return Err(Error::Validation(
                "train and test sets disagree on classes or width".into(),
            ));
        }
        Ok((train, test))
    }

    pub fn split_for(&self, train: &Dataset) -> ShotSplit {
        self.split_thresholds.unwrap_or_else(|| {
            ShotSplit::relative_to_head(train.class_counts().iter().copied().max().unwrap_or(0))
        })
    }

    pub fn plan(&self, train: &Dataset) -> Result<StagePlan> {
        self.validate()?;
        let kinds = self.teacher_kinds()?;
        let teachers: Vec<TeacherSpec> = kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| TeacherSpec::nth(kind, self.seed, i))
            .collect();
        let mut model = ModelSpec::new(train.dim(), train.num_classes());
        model.gamma = self.gamma;
        model.widths = self
            .widths
            .clone()
            .unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
        let stage1 = TrainConfig {
            epochs: self.epochs_stage1,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            seed: self.seed,
            sampling: SamplingKind::Instance,
            distill: DistillConfig::none(),
            augment_sigma: self.augment_sigma,
        };
        let finetune = self.method == Method::Finetune;
        let stage2 = TrainConfig {
            epochs: self.epochs_stage2.unwrap_or(if finetune {
                DEFAULT_FINETUNE_EPOCHS
            } else {
                self.epochs_stage1
            }),
            lr0: self.lr_stage2.unwrap_or(if finetune {
                self.lr0 * FINETUNE_LR_FRACTION
            } else {
                self.lr0
            }),
            sampling: SamplingKind::ClassBalanced,
            distill: self.distill_config(),
            augment_sigma: 0.0,
            ..stage1.clone()
        };
        let plan = StagePlan {
            method: self.method,
            seed: self.seed,
            model,
            teachers,
            stage1,
            stage2,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Short content hash identifying this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// The configuration echoed into reports, with the RNG named.
    pub fn echo(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.insert("rng".into(), RNG_ALGORITHM.into());
            map.insert("config_hash".into(), self.hash().into());
        }
        value
    }
}

fn config_error(e: &toml::de::Error) -> Error {
    Error::Config(e.message().trim().to_string())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in {spec:?}")))?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub report: EvalReport,
    pub accuracy: SplitAccuracy,
    /// `(name, model)` pairs worth checkpointing.
    pub models: Vec<(String, Model)>,
    pub outcome_history: crate::train::History,
}

/// Runs the configured method and evaluates it on the test set.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let (train, test) = cfg.datasets()?;
    run_on(cfg, &train, &test)
}

pub fn run_on(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let plan = cfg.plan(train)?;
    let split = cfg.split_for(train);
    log::info!(
        "{} seed {}: {} teacher(s)",
        cfg.method,
        cfg.seed,
        plan.teachers.len()
    );
    let PlanOutcome {
        final_model,
        teachers,
        history,
    } = plan.run(train)?;
    let tags = split.assign(train.class_counts())?;
    let (accuracy, ncm) = match &final_model {
        Some(m) => (
            eval::split_accuracy(&m.predict(test)?, test.labels(), &tags)?,
            Some(eval::ncm_probe(m, train, test)?),
        ),
        None => (
            eval::split_accuracy(&ensemble_predict(&teachers, test)?, test.labels(), &tags)?,
            None,
        ),
    };
    let report = EvalReport::new(
        cfg.method.name(),
        cfg.seed,
        &accuracy,
        ncm,
        cfg.echo(),
        split,
    );
    let mut models: Vec<(String, Model)> = teachers
        .into_iter()
        .enumerate()
        .map(|(i, m)| (format!("teacher_{i}"), m))
        .collect();
    if let Some(m) = final_model {
        models.push(("model".into(), m));
    }
    Ok(RunOutput {
        report,
        accuracy,
        models,
        outcome_history: history,
    })
}
