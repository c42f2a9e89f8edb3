//! SGD with momentum, the cosine learning-rate schedule, the single-stage
//! training loop and the two-stage recipes built on it.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, DEFAULT_AUGMENT_SIGMA};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    concat_teacher_features, objective, DistillConfig, DistillMode, StudentBatch, TeacherBatch,
};
use crate::model::{Model, ModelSpec};
use crate::rng;
use crate::sampling::{batches_per_epoch, BatchIterator, SamplingKind, SamplingStrategy};
use crate::tensor::Tensor;

pub const DEFAULT_LR0: f64 = 0.2;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 10;
/// Fine-tuning learning rate as a fraction of the stage-1 rate (0.01 vs 0.2).
pub const FINETUNE_LR_FRACTION: f64 = 0.05;

/// `velocity ← momentum·velocity + grad; param ← param − lr·velocity`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`, reaching 0 at `total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * progress).cos())
}

/// Momentum SGD over a model's differentiable parameters.
///
/// Parameters are replaced by fresh leaves after each update, which also
/// discards the gradients they collected.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (slot, param) in self.velocity.iter_mut().zip(params) {
            if !param.requires_grad() {
                continue;
            }
            let Some(grad) = param.grad() else { continue };
            let velocity = slot.get_or_insert_with(|| vec![0.0; grad.len()]);
            let mut data = param.data().to_vec();
            sgd_step(&mut data, &grad, velocity, lr, self.momentum);
            *param = Tensor::param(data, param.shape())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub seed: u64,
    pub sampling: SamplingKind,
    pub distill: DistillConfig,
    pub augment_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr0: DEFAULT_LR0,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            sampling: SamplingKind::Instance,
            distill: DistillConfig::none(),
            augment_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // lr0 = 0 is allowed: it freezes every parameter.
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.augment_sigma.is_finite() && self.augment_sigma >= 0.0) {
            return Err(Error::Config("augment_sigma must be non-negative".into()));
        }
        self.distill.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Per-instance teacher signals over a training set, row-aligned with it.
#[derive(Debug, Clone)]
pub struct DistillTargets {
    /// `v̂` for one teacher, or the normalized concatenation `V̂` for several.
    pub features: Option<(Vec<f64>, usize)>,
    pub logits: Option<(Vec<f64>, usize)>,
}

impl DistillTargets {
    /// Evaluates frozen teachers on every instance of `data`, without input
    /// noise.
    pub fn from_teachers(teachers: &[Model], data: &Dataset, mode: DistillMode) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Config(
                "distillation needs at least one teacher".into(),
            ));
        }
        let n = data.len();
        let described = teachers
            .iter()
            .map(|t| t.describe(data))
            .collect::<Result<Vec<_>>>()?;
        let d = teachers[0].spec.feature_dim();
        if teachers.iter().any(|t| t.spec.feature_dim() != d) {
            return Err(Error::Config(
                "teachers disagree on descriptor width".into(),
            ));
        }
        let single = |what: &str| -> Result<()> {
            if teachers.len() != 1 {
                return Err(Error::Config(format!(
                    "{what} distillation takes exactly one teacher, got {}",
                    teachers.len()
                )));
            }
            Ok(())
        };
        let logits_of =
            |t: &Model| -> Result<(Vec<f64>, usize)> { Ok((t.logits(data)?, t.spec.num_classes)) };
        Ok(match mode {
            DistillMode::None => DistillTargets {
                features: None,
                logits: None,
            },
            DistillMode::Feature => {
                single("feature")?;
                DistillTargets {
                    features: Some((described[0].clone(), d)),
                    logits: None,
                }
            }
            DistillMode::Classifier => {
                single("classifier")?;
                DistillTargets {
                    features: None,
                    logits: Some(logits_of(&teachers[0])?),
                }
            }
            DistillMode::Hybrid => {
                single("hybrid")?;
                DistillTargets {
                    features: Some((described[0].clone(), d)),
                    logits: Some(logits_of(&teachers[0])?),
                }
            }
            DistillMode::Ensemble => {
                let tables: Vec<&[f64]> = described.iter().map(Vec::as_slice).collect();
                let cat = concat_teacher_features(&tables, n, d)?;
                DistillTargets {
                    features: Some((cat, d * teachers.len())),
                    logits: None,
                }
            }
        })
    }

    fn batch(&self, indices: &[usize]) -> Result<TeacherBatch> {
        let gather = |table: &Option<(Vec<f64>, usize)>| -> Result<Option<Tensor>> {
            table
                .as_ref()
                .map(|(data, w)| {
                    let mut rows = Vec::with_capacity(indices.len() * w);
                    for &i in indices {
                        rows.extend_from_slice(&data[i * w..(i + 1) * w]);
                    }
                    Ok(Tensor::new(rows, &[indices.len(), *w])?)
                })
                .transpose()
        };
        Ok(TeacherBatch {
            features: gather(&self.features)?,
            logits: gather(&self.logits)?,
        })
    }
}

/// Trains `model` in place for `cfg.epochs × ceil(n / batch_size)` steps.
///
/// Every step samples a batch, optionally perturbs the inputs, evaluates the
/// loss selected by `cfg.distill.mode`, back-propagates and takes a momentum
/// SGD step at the cosine-scheduled rate. A non-finite loss aborts with the
/// step, rate and loss parts.
pub fn train_single_stage(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    targets: Option<&DistillTargets>,
    eval_set: Option<&Dataset>,
) -> Result<History> {
    cfg.validate()?;
    if data.dim() != model.spec.input_dim || data.num_classes() != model.spec.num_classes {
        return Err(Error::Config(format!(
            "dataset is {}-dim with {} classes, model expects {} and {}",
            data.dim(),
            data.num_classes(),
            model.spec.input_dim,
            model.spec.num_classes
        )));
    }
    let empty = DistillTargets {
        features: None,
        logits: None,
    };
    let targets = match (cfg.distill.mode, targets) {
        (DistillMode::None, _) => &empty,
        (_, Some(t)) => t,
        (mode, None) => {
            return Err(Error::Config(format!(
                "{mode} distillation needs teacher targets"
            )))
        }
    };

    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut sampler = BatchIterator::new(
        data,
        cfg.batch_size,
        SamplingStrategy {
            kind: cfg.sampling,
            seed: cfg.seed,
        },
    )?;
    let mut noise = rng::rng_for(cfg.seed, rng::stream::AUGMENT);
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            let lr = cosine_lr(step, total, cfg.lr0);
            let indices = sampler.next_batch();
            let (mut x, labels) = data.gather(&indices)?;
            if cfg.augment_sigma > 0.0 {
                x = augment(&x, cfg.augment_sigma, &mut noise)?;
            }
            let fwd = model.forward(&x)?;
            let teacher = targets.batch(&indices)?;
            let student = StudentBatch {
                logits: &fwd.logits,
                features: &fwd.features,
                embedding: &fwd.embedding,
                labels: &labels,
            };
            let obj = objective(&student, &teacher, &cfg.distill)?;
            let value = obj.total.item()?;
            if !value.is_finite() {
                let distill = obj
                    .distillation
                    .map_or("n/a".to_string(), |d| format!("{d}"));
                return Err(Error::NumericalAbort {
                    step,
                    lr,
                    terms: format!(
                        "total={value} cross_entropy={} distillation={distill}",
                        obj.cross_entropy
                    ),
                });
            }
            loss_sum += value;
            obj.total.backward()?;
            opt.step(model.parameters_mut(), lr)?;
        }
        let eval_accuracy = eval_set
            .map(|d| -> Result<f64> { Ok(eval::accuracy(&model.predict(d)?, d.labels())) })
            .transpose()?;
        log::debug!(
            "epoch {epoch}: loss {:.5}{}",
            loss_sum / per_epoch as f64,
            eval_accuracy.map_or(String::new(), |a| format!(" acc {a:.4}"))
        );
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            eval_accuracy,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Standard,
    DataAug,
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherKind::Standard => "standard",
            TeacherKind::DataAug => "data_aug",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub seed: u64,
}

impl TeacherSpec {
    /// Teacher `index` of a plan whose base seed is `base`.
    pub fn nth(kind: TeacherKind, base: u64, index: usize) -> Self {
        TeacherSpec {
            kind,
            seed: teacher_seed(base, index),
        }
    }
}

pub fn teacher_seed(base: u64, index: usize) -> u64 {
    rng::derive_seed(base, rng::stream::TEACHER_BASE + index as u64)
}

pub fn student_seed(base: u64) -> u64 {
    rng::derive_seed(base, rng::stream::STUDENT)
}

/// Standard-then-augmented split used when only `K` is given:
/// `⌊K/2⌋` standard teachers and the rest with input noise.
pub fn default_composition(k: usize) -> Vec<TeacherKind> {
    let standard = k / 2;
    let mut kinds = vec![TeacherKind::Standard; standard];
    kinds.extend(std::iter::repeat_n(TeacherKind::DataAug, k - standard));
    kinds
}

/// Stage 1: a fresh model trained with instance sampling. Augmented teachers
/// see input noise of `augment_sigma` (falling back to 0.01 when unset).
pub fn train_teacher(
    spec: &ModelSpec,
    data: &Dataset,
    base: &TrainConfig,
    teacher: TeacherSpec,
) -> Result<(Model, History)> {
    let sigma = match teacher.kind {
        TeacherKind::Standard => 0.0,
        TeacherKind::DataAug if base.augment_sigma > 0.0 => base.augment_sigma,
        TeacherKind::DataAug => DEFAULT_AUGMENT_SIGMA,
    };
    let cfg = TrainConfig {
        seed: teacher.seed,
        sampling: SamplingKind::Instance,
        distill: DistillConfig::none(),
        augment_sigma: sigma,
        ..base.clone()
    };
    let mut spec = spec.clone();
    spec.ensemble_k = None;
    let mut model = Model::init(&spec, teacher.seed)?;
    let history = train_single_stage(&mut model, data, &cfg, None, None)?;
    Ok((model, history))
}

/// Trains all teachers, in parallel; returns them in `teachers` order.
pub fn train_teachers(
    spec: &ModelSpec,
    data: &Dataset,
    base: &TrainConfig,
    teachers: &[TeacherSpec],
) -> Result<Vec<Model>> {
    teachers
        .par_iter()
        .map(|t| train_teacher(spec, data, base, *t).map(|(m, _)| m))
        .collect()
}

/// Stage 2 of class-balanced distillation: a student initialized from
/// `seed` alone, trained with class-balanced sampling against frozen
/// teachers. With `Ensemble` mode the student gains a projection head to
/// `d·K` dimensions that the classifier reads from.
pub fn run_cbd(
    teachers: &[Model],
    data: &Dataset,
    spec: &ModelSpec,
    stage2: &TrainConfig,
    seed: u64,
) -> Result<(Model, History)> {
    let mode = stage2.distill.mode;
    let mut spec = spec.clone();
    for t in teachers {
        if t.spec.feature_dim() != spec.feature_dim() || t.spec.num_classes != spec.num_classes {
            return Err(Error::Config(format!(
                "teacher descriptor {}x{} classes does not match student {}x{}",
                t.spec.feature_dim(),
                t.spec.num_classes,
                spec.feature_dim(),
                spec.num_classes
            )));
        }
    }
    spec.ensemble_k = (mode == DistillMode::Ensemble).then_some(teachers.len());
    let targets = DistillTargets::from_teachers(teachers, data, mode)?;
    let cfg = TrainConfig {
        seed,
        sampling: SamplingKind::ClassBalanced,
        augment_sigma: 0.0,
        distill: DistillConfig {
            k: teachers.len(),
            ..stage2.distill
        },
        ..stage2.clone()
    };
    let mut student = Model::init(&spec, seed)?;
    let history = train_single_stage(&mut student, data, &cfg, Some(&targets), None)?;
    Ok((student, history))
}

/// Classifier re-training: freezes the stage-1 representation, draws a new
/// classifier from `seed` and trains it alone with class-balanced sampling.
pub fn run_crt(
    stage1: &Model,
    data: &Dataset,
    stage2: &TrainConfig,
    seed: u64,
) -> Result<(Model, History)> {
    let mut model = stage1.duplicate();
    model.freeze_representation();
    model.reinit_classifier(seed)?;
    let cfg = TrainConfig {
        seed,
        sampling: SamplingKind::ClassBalanced,
        distill: DistillConfig::none(),
        augment_sigma: 0.0,
        ..stage2.clone()
    };
    let history = train_single_stage(&mut model, data, &cfg, None, None)?;
    Ok((model, history))
}

/// Fine-tuning: continues every parameter of the stage-1 model with
/// class-balanced sampling at the stage-2 rate.
pub fn run_finetune(
    stage1: &Model,
    data: &Dataset,
    stage2: &TrainConfig,
    seed: u64,
) -> Result<(Model, History)> {
    let mut model = stage1.duplicate();
    let cfg = TrainConfig {
        seed,
        sampling: SamplingKind::ClassBalanced,
        distill: DistillConfig::none(),
        augment_sigma: 0.0,
        ..stage2.clone()
    };
    let history = train_single_stage(&mut model, data, &cfg, None, None)?;
    Ok((model, history))
}

/// Predictions from the mean of the teachers' softmax outputs.
pub fn ensemble_predict(teachers: &[Model], data: &Dataset) -> Result<Vec<usize>> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::Config("teacher ensemble needs teachers".into()))?;
    let c = first.spec.num_classes;
    if teachers.iter().any(|t| t.spec.num_classes != c) {
        return Err(Error::Config("teachers disagree on class count".into()));
    }
    let mut mean = vec![0.0; data.len() * c];
    for t in teachers {
        let probs = crate::tensor::softmax_raw(&t.logits(data)?, c);
        mean.iter_mut().zip(&probs).for_each(|(m, p)| *m += p);
    }
    let k = teachers.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean.chunks(c).map(crate::model::argmax).collect())
}

/// Training strategy of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Instance,
    ClassBalanced,
    Crt,
    Finetune,
    Cbd,
    CbdK,
    TeacherEnsemble,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Instance,
        Method::ClassBalanced,
        Method::Crt,
        Method::Finetune,
        Method::Cbd,
        Method::CbdK,
        Method::TeacherEnsemble,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Instance => "instance",
            Method::ClassBalanced => "class_balanced",
            Method::Crt => "crt",
            Method::Finetune => "finetune",
            Method::Cbd => "cbd",
            Method::CbdK => "cbd_k",
            Method::TeacherEnsemble => "teacher_ensemble",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to run one method end to end.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub method: Method,
    pub seed: u64,
    pub model: ModelSpec,
    pub teachers: Vec<TeacherSpec>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

/// Models produced by a plan; `final_model` is `None` for the teacher
/// ensemble, which predicts from `teachers` directly.
pub struct PlanOutcome {
    pub final_model: Option<Model>,
    pub teachers: Vec<Model>,
    pub history: History,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        let k = self.teachers.len();
        match self.method {
            Method::Cbd if k != 1 => Err(Error::Config(format!(
                "cbd needs exactly 1 teacher, got {k}"
            ))),
            Method::CbdK if k < 1 => Err(Error::Config("cbd_k needs at least 1 teacher".into())),
            Method::TeacherEnsemble if k < 2 => Err(Error::Config(format!(
                "teacher_ensemble needs at least 2 teachers, got {k}"
            ))),
            Method::Crt | Method::Finetune | Method::Instance | Method::ClassBalanced if k != 1 => {
                Err(Error::Config(format!(
                    "{} trains exactly one stage-1 model, got {k}",
                    self.method
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn run(&self, data: &Dataset) -> Result<PlanOutcome> {
        self.validate()?;
        let one_stage = |sampling: SamplingKind| -> Result<PlanOutcome> {
            let cfg = TrainConfig {
                seed: self.teachers[0].seed,
                sampling,
                distill: DistillConfig::none(),
                augment_sigma: 0.0,
                ..self.stage1.clone()
            };
            let mut model = Model::init(&self.model, self.teachers[0].seed)?;
            let history = train_single_stage(&mut model, data, &cfg, None, None)?;
            Ok(PlanOutcome {
                final_model: Some(model),
                teachers: Vec::new(),
                history,
            })
        };
        match self.method {
            Method::Instance => one_stage(SamplingKind::Instance),
            Method::ClassBalanced => one_stage(SamplingKind::ClassBalanced),
            Method::Crt | Method::Finetune => {
                let (stage1, _) = train_teacher(&self.model, data, &self.stage1, self.teachers[0])?;
                let seed = student_seed(self.seed);
                let (model, history) = if self.method == Method::Crt {
                    run_crt(&stage1, data, &self.stage2, seed)?
                } else {
                    run_finetune(&stage1, data, &self.stage2, seed)?
                };
                Ok(PlanOutcome {
                    final_model: Some(model),
                    teachers: vec![stage1],
                    history,
                })
            }
            Method::Cbd | Method::CbdK => {
                let teachers = train_teachers(&self.model, data, &self.stage1, &self.teachers)?;
                let (student, history) = run_cbd(
                    &teachers,
                    data,
                    &self.model,
                    &self.stage2,
                    student_seed(self.seed),
                )?;
                Ok(PlanOutcome {
                    final_model: Some(student),
                    teachers,
                    history,
                })
            }
            Method::TeacherEnsemble => {
                let teachers = train_teachers(&self.model, data, &self.stage1, &self.teachers)?;
                Ok(PlanOutcome {
                    final_model: None,
                    teachers,
                    history: History::default(),
                })
            }
        }
    }
}
