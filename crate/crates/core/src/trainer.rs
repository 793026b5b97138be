//! Supervised pre-training and sample-to-sample self-distillation.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, PseudoLabelAudit};
use crate::datagen::{DatasetSplits, TrainingView};
use crate::graph::Graph;
use crate::losses::{self, LossBreakdown};
use crate::model::{self, ArchConfig, Model, ModelError};
use crate::rng::{self, Rng};
use crate::selection::{self, SelectionError, StudentSet, Teacher, TeacherSource};
use crate::style::{self, FeatureStats, StyleError};
use crate::tensor::{Tensor, TensorError};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("{0} is empty")]
    EmptySplit(&'static str),
    #[error("non-finite gradient in parameter `{parameter}` at iteration {iteration}")]
    NonFiniteGradient { parameter: String, iteration: u64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pairs, assistant generation and self-distillation.
    #[default]
    S3d,
    /// Pairs distilled directly from the detached teacher prediction.
    S3dNoAf,
    /// Labeled training only, continued from the pre-trained model.
    SPlusT,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::S3d => "s3d",
            Mode::S3dNoAf => "s3d-no-af",
            Mode::SPlusT => "s-plus-t",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub val_frequency: u64,
    pub patience: usize,
    pub max_iterations: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            val_frequency: 200,
            patience: 5,
            max_iterations: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled target samples per class.
    pub shots: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Confidence threshold of the student filter.
    pub alpha: f64,
    /// Beta concentration of the blend coefficient.
    pub rho: f64,
    /// Student-set regeneration interval.
    pub student_interval: u64,
    /// Ramp-up steepness.
    pub rampup_m: f64,
    pub max_iterations: u64,
    pub val_frequency: u64,
    pub patience: usize,
    /// Which block outputs receive assistant generation.
    pub hooks: Vec<bool>,
    pub mode: Mode,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots: 3,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.05,
            alpha: 0.95,
            rho: 0.1,
            student_interval: 100,
            rampup_m: 8.0,
            max_iterations: 10_000,
            val_frequency: 250,
            patience: 5,
            hooks: vec![true, true],
            mode: Mode::S3d,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(invalid("batch_size", "must be even and at least 2"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("rho", self.rho),
            ("rampup_m", self.rampup_m),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        let at_least_one = [
            ("student_interval", self.student_interval),
            ("max_iterations", self.max_iterations),
            ("val_frequency", self.val_frequency),
            ("patience", self.patience as u64),
            ("pretrain.val_frequency", self.pretrain.val_frequency),
            ("pretrain.patience", self.pretrain.patience as u64),
            ("pretrain.max_iterations", self.pretrain.max_iterations),
        ];
        for (field, v) in at_least_one {
            if v < 1 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Architecture for images of `input_shape` and `num_classes` classes.
    pub fn arch(&self, input_shape: [usize; 3], num_classes: usize) -> Result<ArchConfig, TrainError> {
        let arch = ArchConfig {
            input_shape,
            num_classes,
            temperature: self.temperature,
            hooks: self.hooks.clone(),
            ..ArchConfig::default()
        };
        arch.validate().map_err(|e| invalid("hooks", e.to_string()))?;
        Ok(arch)
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step with momentum and coupled weight decay:
/// `v = momentum * v + grad + weight_decay * p; p -= lr * v`.
///
/// Nothing is updated when any gradient entry is non-finite.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    names: &[String],
    cfg: &SgdConfig,
    iteration: u64,
) -> Result<(), TrainError> {
    for (i, grad) in grads.iter().enumerate() {
        if !grad.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                parameter: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                iteration,
            });
        }
        if grad.shape() != params[i].shape() || velocity[i].shape() != params[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: params[i].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            }
            .into());
        }
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
            *pv -= cfg.learning_rate * *vv;
        }
    }
    Ok(())
}

/// A model kept because it reached the best validation accuracy so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub model: Model,
    pub val_acc: f64,
    pub iteration: u64,
}

/// Mutable state of an optimization run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub iteration: u64,
    pub students: StudentSet,
    pub average_margin: Option<f64>,
    pub best: Option<Snapshot>,
    bad_checks: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let k = model.config().num_classes;
        Self {
            model,
            velocity,
            iteration: 0,
            students: StudentSet::empty(k),
            average_margin: None,
            best: None,
            bad_checks: 0,
        }
    }

    /// Records a validation result; returns true once `patience` checks in a
    /// row failed to improve on the best snapshot.
    fn observe(&mut self, val_acc: f64, patience: usize) -> bool {
        if self.best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            self.best = Some(Snapshot {
                model: self.model.clone(),
                val_acc,
                iteration: self.iteration,
            });
            self.bad_checks = 0;
            false
        } else {
            self.bad_checks += 1;
            self.bad_checks >= patience
        }
    }

    fn apply(&mut self, grads: &[Tensor], cfg: &SgdConfig) -> Result<(), TrainError> {
        let names = self.model.parameter_names();
        sgd_step(
            self.model.parameters_mut(),
            &mut self.velocity,
            grads,
            &names,
            cfg,
            self.iteration,
        )
    }
}

fn teacher_images(view: &TrainingView<'_>, teachers: &[Teacher]) -> Result<Tensor, TrainError> {
    let shape = view.source.shape();
    let mut data = Vec::with_capacity(teachers.len() * shape.iter().product::<usize>());
    for t in teachers {
        let set = match t.source {
            TeacherSource::Source => view.source,
            TeacherSource::LabeledTarget => view.labeled_target,
        };
        data.extend(set.image(t.index).iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::new(vec![teachers.len(), shape[0], shape[1], shape[2]], data)?)
}

/// Uniform labeled draws, half from each labeled set when both are present.
fn labeled_batch(view: &TrainingView<'_>, n: usize, rng: &mut Rng) -> Vec<Teacher> {
    let from_target = if view.labeled_target.is_empty() { 0 } else { n - n / 2 };
    (0..n)
        .map(|i| {
            let (set, source) = if i < n - from_target {
                (view.source, TeacherSource::Source)
            } else {
                (view.labeled_target, TeacherSource::LabeledTarget)
            };
            let index = rng::index(rng, set.len());
            Teacher {
                source,
                index,
                label: set.labels()[index] as usize,
            }
        })
        .collect()
}

fn gradients(g: &Graph, grads: &mut crate::graph::Gradients, vars: &model::ModelVars) -> Vec<Tensor> {
    vars.params()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect()
}

/// One step of labeled cross-entropy on `batch_size` labeled draws.
fn supervised_step(
    state: &mut TrainState,
    view: &TrainingView<'_>,
    batch_size: usize,
    sgd: &SgdConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown, TrainError> {
    let teachers = labeled_batch(view, batch_size, rng);
    let labels: Vec<usize> = teachers.iter().map(|t| t.label).collect();
    let x = teacher_images(view, &teachers)?;
    let mut g = Graph::new();
    let vars = state.model.bind(&mut g, true)?;
    let xv = g.constant(x)?;
    let f = state.model.extract(&mut g, &vars, xv)?;
    let p = state.model.classify(&mut g, &vars, f.embedding)?;
    let loss = losses::labeled_ce(&mut g, p, &labels)?;
    let (total, breakdown) = losses::total_loss(&mut g, loss, None, None, 0.0)?;
    let mut grads = g.backward(total)?;
    let grads = gradients(&g, &mut grads, &vars);
    state.apply(&grads, sgd)?;
    Ok(breakdown)
}

fn check_labeled(view: &TrainingView<'_>) -> Result<(), TrainError> {
    if view.source.is_empty() && view.labeled_target.is_empty() {
        return Err(TrainError::EmptySplit("labeled training data"));
    }
    if view.val.is_empty() {
        return Err(TrainError::EmptySplit("validation split"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Best-validation snapshot.
    pub best: Snapshot,
    pub iterations_run: u64,
}

/// Labeled cross-entropy on the source and labeled target until validation
/// accuracy plateaus or the iteration cap is reached.
pub fn pretrain(model: Model, view: TrainingView<'_>, cfg: &TrainConfig) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    check_labeled(&view)?;
    let pc = &cfg.pretrain;
    let sgd = cfg.sgd();
    let mut rng = rng::stream(cfg.seed, "pretrain/batches");
    let mut state = TrainState::new(model);
    while state.iteration < pc.max_iterations {
        supervised_step(&mut state, &view, cfg.batch_size, &sgd, &mut rng)?;
        state.iteration += 1;
        if state.iteration % pc.val_frequency == 0 {
            let acc = analysis::evaluate(&state.model, view.val)?;
            log::debug!("pretrain iteration {} val_acc {acc:.4}", state.iteration);
            if state.observe(acc, pc.patience) {
                break;
            }
        }
    }
    if state.best.is_none() {
        let acc = analysis::evaluate(&state.model, view.val)?;
        state.observe(acc, pc.patience);
    }
    Ok(PretrainOutcome {
        iterations_run: state.iteration,
        best: state.best.expect("at least one validation check"),
    })
}

/// One line of the metrics log, written at every validation check. Loss
/// values are means over the iterations since the previous check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub iteration: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_acc: f64,
    pub student_set_size: usize,
    /// Fraction of correct pseudo-labels in the student set, computed by the
    /// evaluator from held-out labels; absent when no audit is attached.
    pub pseudo_label_precision: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct S3dOutcome {
    pub best: Snapshot,
    pub iterations_run: u64,
    /// Iterations at which the student set was regenerated.
    pub refreshes: Vec<u64>,
    pub records: Vec<MetricsRecord>,
}

/// Teacher statistics at every block, one entry per teacher row.
fn teacher_stats(g: &Graph, block_outputs: &[crate::graph::Var], rows: &[usize]) -> Result<Vec<FeatureStats>, TrainError> {
    let per_block = block_outputs
        .iter()
        .map(|&z| style::batch_feature_stats(g.value(z)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rows
        .iter()
        .map(|&r| FeatureStats {
            layers: per_block.iter().map(|b| b[r].clone()).collect(),
        })
        .collect())
}

/// Assistant probabilities for a batch of students, evaluated on a separate
/// graph so they enter the training graph as plain numbers.
pub fn assistant_probs(
    model: &Model,
    students: &Tensor,
    teacher: &[FeatureStats],
    eps: &[f64],
) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let x = g.constant(students.clone())?;
    let a = style::assistant_forward(model, &mut g, &vars, x, teacher, eps)?;
    Ok(g.value(a).clone())
}

struct StepRngs {
    batches: Rng,
    epsilon: Rng,
}

fn s3d_step(
    state: &mut TrainState,
    view: &TrainingView<'_>,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<LossBreakdown, TrainError> {
    let sgd = cfg.sgd();
    let lambda = losses::lambda_rampup(state.iteration as f64 / cfg.max_iterations as f64, cfg.rampup_m);
    let batch = selection::sample_pair_batch(
        view.source,
        view.labeled_target,
        &state.students,
        cfg.batch_size,
        &mut rngs.batches,
    )?;
    let teachers: Vec<Teacher> = batch.pairs.iter().map(|p| p.teacher).collect();
    let labels: Vec<usize> = teachers.iter().map(|t| t.label).collect();
    let model = &state.model;

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true)?;
    let xt = g.constant(teacher_images(view, &teachers)?)?;
    let ft = model.extract(&mut g, &vars, xt)?;
    let pt = model.classify(&mut g, &vars, ft.embedding)?;
    let l_lab = losses::labeled_ce(&mut g, pt, &labels)?;

    let paired_rows: Vec<usize> = (0..batch.pairs.len()).filter(|&i| batch.pairs[i].student.is_some()).collect();
    let (l_unl, l_pair) = if paired_rows.is_empty() {
        (None, None)
    } else {
        let student_idx: Vec<usize> = paired_rows.iter().map(|&i| batch.pairs[i].student.unwrap()).collect();
        let pseudo: Vec<usize> = paired_rows.iter().map(|&i| labels[i]).collect();
        let xs_t = view.unlabeled.batch(&student_idx);
        let xs = g.constant(xs_t.clone())?;
        let fs = model.extract(&mut g, &vars, xs)?;
        let ps = model.classify(&mut g, &vars, fs.embedding)?;
        let l_unl = losses::weighted_ce(&mut g, ps, &pseudo)?;
        let target = match cfg.mode {
            Mode::S3d => {
                let stats = teacher_stats(&g, &ft.block_outputs, &paired_rows)?;
                let eps = (0..paired_rows.len())
                    .map(|_| style::sample_epsilon(cfg.rho, &mut rngs.epsilon))
                    .collect::<Result<Vec<_>, _>>()?;
                assistant_probs(model, &xs_t, &stats, &eps)?
            }
            Mode::S3dNoAf => g.value(pt).select_rows(&paired_rows)?,
            Mode::SPlusT => unreachable!("labeled-only mode takes the supervised path"),
        };
        let a = g.constant(target)?;
        let l_pair = losses::pair_kl(&mut g, a, ps)?;
        (Some(l_unl), Some(l_pair))
    };
    let (total, breakdown) = losses::total_loss(&mut g, l_lab, l_unl, l_pair, lambda)?;
    let mut grads = g.backward(total)?;
    let grads = gradients(&g, &mut grads, &vars);
    state.apply(&grads, &sgd)?;
    Ok(breakdown)
}

#[derive(Default)]
struct LossMeter {
    sum: LossBreakdown,
    n: usize,
}

impl LossMeter {
    fn add(&mut self, b: &LossBreakdown) {
        self.sum.labeled += b.labeled;
        self.sum.unlabeled += b.unlabeled;
        self.sum.pair += b.pair;
        self.sum.total += b.total;
        self.sum.lambda = b.lambda;
        self.n += 1;
    }

    fn take(&mut self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        let out = LossBreakdown {
            labeled: self.sum.labeled / n,
            unlabeled: self.sum.unlabeled / n,
            pair: self.sum.pair / n,
            lambda: self.sum.lambda,
            total: self.sum.total / n,
        };
        *self = Self::default();
        out
    }
}

/// Alternates student-set regeneration (every `student_interval` iterations,
/// starting at 0) with paired self-distillation, validating every
/// `val_frequency` iterations and returning the best-validation snapshot.
///
/// Never touches unlabeled ground truth; `audit`, when given, is the only
/// consumer of it and only feeds the diagnostic precision column.
pub fn train_s3d(
    pretrained: &Model,
    view: TrainingView<'_>,
    cfg: &TrainConfig,
    average_margin: f64,
    audit: Option<&PseudoLabelAudit<'_>>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<S3dOutcome, TrainError> {
    cfg.validate()?;
    check_labeled(&view)?;
    if view.unlabeled.is_empty() {
        return Err(TrainError::EmptySplit("unlabeled target split"));
    }
    let mut state = TrainState::new(pretrained.clone());
    state.average_margin = Some(average_margin);
    let mut rngs = StepRngs {
        batches: rng::stream(cfg.seed, "train/batches"),
        epsilon: rng::stream(cfg.seed, "train/epsilon"),
    };
    let sgd = cfg.sgd();
    let mut refreshes = Vec::new();
    let mut records = Vec::new();
    let mut meter = LossMeter::default();

    while state.iteration < cfg.max_iterations {
        if state.iteration % cfg.student_interval == 0 {
            state.students = selection::build_student_set(
                &state.model,
                view.unlabeled,
                average_margin,
                cfg.alpha,
                state.iteration,
            )?;
            refreshes.push(state.iteration);
        }
        let breakdown = match cfg.mode {
            Mode::SPlusT => supervised_step(&mut state, &view, cfg.batch_size, &sgd, &mut rngs.batches)?,
            Mode::S3d | Mode::S3dNoAf => s3d_step(&mut state, &view, cfg, &mut rngs)?,
        };
        meter.add(&breakdown);
        state.iteration += 1;
        if state.iteration % cfg.val_frequency == 0 {
            let val_acc = analysis::evaluate(&state.model, view.val)?;
            let record = MetricsRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                iteration: state.iteration,
                losses: meter.take(),
                val_acc,
                student_set_size: state.students.len(),
                pseudo_label_precision: audit.and_then(|a| a.precision(&state.students)),
            };
            log::debug!("{} iteration {} val_acc {val_acc:.4}", cfg.mode.as_str(), state.iteration);
            if let Some(out) = metrics.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(out, "{line}").map_err(|source| TrainError::Io {
                    path: PathBuf::from(METRICS_FILE),
                    source,
                })?;
            }
            records.push(record);
            if state.observe(val_acc, cfg.patience) {
                break;
            }
        }
    }
    if state.best.is_none() {
        let acc = analysis::evaluate(&state.model, view.val)?;
        state.observe(acc, cfg.patience);
    }
    Ok(S3dOutcome {
        best: state.best.expect("at least one validation check"),
        iterations_run: state.iteration,
        refreshes,
        records,
    })
}

/// Everything produced by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub pretrained: Snapshot,
    pub average_margin: f64,
    pub adapted: S3dOutcome,
}

/// Fresh model for `data` under `cfg`, initialized from the configured seed.
pub fn init_model(data: &DatasetSplits, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let arch = cfg.arch(data.image_shape(), data.num_classes)?;
    Ok(Model::init(arch, &mut rng::stream(cfg.seed, "init"))?)
}

/// Pre-training followed by adaptation. When `out` is given, the pre-trained
/// checkpoint (which carries the frozen average margin), the metrics log and
/// the final checkpoint are written there.
pub fn run_experiment(data: &DatasetSplits, cfg: &TrainConfig, out: Option<&Path>) -> Result<Experiment, TrainError> {
    cfg.validate()?;
    let pre = pretrain(init_model(data, cfg)?, data.training_view(), cfg)?;
    let margin = selection::average_margin(&pre.best.model, &data.target_unlabeled)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        model::save_checkpoint(
            &dir.join(PRETRAINED_CHECKPOINT),
            &pre.best.model,
            pre.best.iteration,
            cfg.seed,
            Some(margin),
        )?;
    }
    adapt_from(data, cfg, pre.best, margin, out)
}

/// The adaptation stage alone, resumed from a pre-trained snapshot.
pub fn adapt_from(
    data: &DatasetSplits,
    cfg: &TrainConfig,
    pretrained: Snapshot,
    average_margin: f64,
    out: Option<&Path>,
) -> Result<Experiment, TrainError> {
    let audit = PseudoLabelAudit::new(&data.unlabeled_truth);
    let adapted = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(METRICS_FILE);
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            let outcome = train_s3d(&pretrained.model, data.training_view(), cfg, average_margin, Some(&audit), Some(&mut w))?;
            w.flush().map_err(io_err(&path))?;
            model::save_checkpoint(
                &dir.join(FINAL_CHECKPOINT),
                &outcome.best.model,
                outcome.best.iteration,
                cfg.seed,
                Some(average_margin),
            )?;
            outcome
        }
        None => train_s3d(&pretrained.model, data.training_view(), cfg, average_margin, Some(&audit), None)?,
    };
    Ok(Experiment {
        pretrained,
        average_margin,
        adapted,
    })
}
