//! Training loop with dynamic decoder freezing.
//!
//! A batch updates the shared encoder plus exactly the branches whose task
//! appears in it. Each branch runs only on its own rows; Adam skips absent
//! branches entirely, so their moments do not decay between visits.

mod augment;
mod eval;
mod prepare;
mod refine;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, AdamConfig, AdamState, Graph, Mode, NodeId, ParamId, Scalar, Tensor};
use crate::losses::{multi_task_loss, sample_losses, LossAgg, LossValue, TaskLoss};
use crate::model::{decoder_group, save_checkpoint, Checkpoint, ModelGraph, Weights, ENCODER, HEAD, SUBTYPE};
use crate::sampler::{BatchMode, BatchPlan, Sampler, SuperTask, TaskDatasetRef};
use crate::{Error, Result};

pub use augment::{colour_jitter, gaussian_blur3, median_blur3, photometric, AugmentConfig, Geometric};
pub use eval::{
    evaluate_classification, evaluate_segmentation, evaluate_subtype, predict_probabilities, subtype_classes,
};
pub use prepare::{
    augment, prepare_subtype_task, prepare_task, PreparedSample, PreparedTarget, PreparedTask, TargetConfig,
    DESK_EROSION_RADIUS,
};
pub use refine::{
    rank_regions_by_error, refine_loop, RankedTile, RefineConfig, RefineReport, RefineRound, RefineState, StopReason, Tile,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// First step (0-based) that uses `dropped`.
    pub drop_step: u64,
    pub dropped: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.drop_step {
            self.initial
        } else {
            self.dropped
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub steps: u64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub mode: BatchMode,
    /// Selection probability per super task; renormalised over the super
    /// tasks that have data in a run.
    pub super_task_probabilities: BTreeMap<String, f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub loss_agg: LossAgg,
    pub targets: TargetConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            steps: 2000,
            lr: LrSchedule {
                initial: 1e-3,
                drop_step: 1500,
                dropped: 1e-4,
            },
            batch_size: 8,
            mode: BatchMode::Mixed,
            super_task_probabilities: BTreeMap::from([
                (crate::data::SEGMENTATION.to_string(), 0.7),
                (crate::data::CLASSIFICATION.to_string(), 0.3),
            ]),
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            loss_agg: LossAgg::Sum,
            targets: TargetConfig::default(),
            adam: AdamConfig::default(),
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            steps: 90_000,
            lr: LrSchedule {
                initial: 1e-3,
                drop_step: 70_000,
                dropped: 1e-4,
            },
            batch_size: 27,
            checkpoint_every: 5000,
            ..TrainConfig::desk()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lr.drop_step >= self.steps {
            return bad(format!("lr.drop_step {} must be below steps {}", self.lr.drop_step, self.steps));
        }
        if !(self.lr.initial > 0.0 && self.lr.dropped > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.super_task_probabilities.values().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad("super task probabilities must be non-negative".into());
        }
        Ok(())
    }
}

/// Augmented samples ready for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[N,3,H,W]`.
    pub images: Tensor<f32>,
    pub tasks: Vec<String>,
    pub targets: Vec<PreparedTarget>,
    pub super_task: String,
    pub mode: BatchMode,
    pub dropout_seed: u64,
}

impl TrainBatch {
    pub fn from_samples(slots: Vec<(String, PreparedSample)>, super_task: &str, mode: BatchMode, dropout_seed: u64) -> Result<Self> {
        let first = slots.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let shape = first.1.image.shape().to_vec();
        let mut pixels = Vec::with_capacity(slots.len() * first.1.image.numel());
        for (_, s) in &slots {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::shape(format!("sample {} has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
            }
            pixels.extend_from_slice(s.image.data());
        }
        let mut dims = vec![slots.len()];
        dims.extend_from_slice(&shape);
        let (tasks, targets) = slots.into_iter().map(|(t, s)| (t, s.target)).unzip();
        Ok(TrainBatch {
            images: Tensor::new(dims, pixels)?,
            tasks,
            targets,
            super_task: super_task.into(),
            mode,
            dropout_seed,
        })
    }

    /// Gathers and augments the planned samples.
    pub fn assemble(
        plan: &BatchPlan,
        tasks: &BTreeMap<String, PreparedTask>,
        rng: &mut ChaCha8Rng,
        config: &AugmentConfig,
    ) -> Result<Self> {
        let mut slots = Vec::with_capacity(plan.slots.len());
        for (task, i) in &plan.slots {
            let t = tasks.get(task).ok_or_else(|| Error::invalid(format!("no data for task {task}")))?;
            let s = t
                .samples
                .get(*i)
                .ok_or_else(|| Error::invalid(format!("task {task} has no sample {i}")))?;
            slots.push((task.clone(), augment(s, rng, config)));
        }
        let seed = rng.random();
        TrainBatch::from_samples(slots, &plan.super_task, plan.mode, seed)
    }

    /// Distinct tasks in sorted order.
    pub fn tasks_present(&self) -> Vec<String> {
        self.tasks.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub per_task: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub tasks_present: Vec<String>,
    /// Groups with at least one parameter stepped by Adam.
    pub updated_groups: Vec<String>,
}

/// Parameter group trained by samples of `task`.
pub fn task_group(model: &ModelGraph, task: &str, target: &PreparedTarget) -> Result<String> {
    if model.has_task(task) {
        return Ok(decoder_group(task));
    }
    match target {
        PreparedTarget::Subtype { .. } if task == SUBTYPE => Ok(SUBTYPE.into()),
        PreparedTarget::Label(_) if model.config.head.is_some() => Ok(HEAD.into()),
        _ => Err(Error::invalid(format!("model has no branch for task {task}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub agg: LossAgg,
    pub dice_eps: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            agg: LossAgg::Sum,
            dice_eps: crate::losses::DEFAULT_DICE_EPS,
        }
    }
}

/// Batch forward and masked multi-task loss. The encoder runs once; each
/// task's branch runs on its own rows only.
pub fn batch_loss<T: Scalar>(
    model: &ModelGraph,
    g: &mut Graph<T>,
    w: Weights<'_, T>,
    x: NodeId,
    tasks: &[String],
    targets: &[PreparedTarget],
    options: StepOptions,
) -> Result<LossValue> {
    let n = tasks.len();
    if g.shape(x).first() != Some(&n) || targets.len() != n {
        return Err(Error::shape(format!("batch of {n} tasks does not match its images or targets")));
    }
    let present: BTreeSet<&String> = tasks.iter().collect();
    let feats = model.encode(g, w, x)?;
    let mut losses = Vec::new();
    for task in present {
        let rows: Vec<usize> = (0..n).filter(|&i| &tasks[i] == task).collect();
        let group = task_group(model, task, &targets[rows[0]])?;
        let own = if rows.len() == n {
            feats.clone()
        } else {
            feats.iter().map(|&f| ops::select_rows(g, f, &rows)).collect::<Result<Vec<_>>>()?
        };
        let logits = if group == HEAD {
            model.classify_features(g, w, &own)?
        } else if group == SUBTYPE {
            model.decode_subtype(g, w, &own)?
        } else {
            model.decode(g, w, task, &own)?
        };
        let row_targets: Vec<_> = rows.iter().map(|&i| targets[i].to_sample_target()).collect();
        let per_sample = sample_losses(g, logits, &row_targets, options.dice_eps)?;
        losses.push(TaskLoss {
            task: task.clone(),
            losses: per_sample,
            rows,
        });
    }
    let task_refs: Vec<&str> = tasks.iter().map(String::as_str).collect();
    multi_task_loss(g, &losses, &task_refs, options.agg)
}

/// One optimisation step. Inputs must already be normalised to `[0,1]`.
pub fn train_step(
    model: &mut ModelGraph,
    adam: &mut AdamState<f32>,
    batch: &TrainBatch,
    lr: f64,
    options: StepOptions,
) -> Result<StepReport> {
    if let Some(v) = batch.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("input value {v} outside the normalised range [0,1]")));
    }
    let present = batch.tasks_present();
    let mut groups = BTreeSet::new();
    for task in &present {
        let row = batch.tasks.iter().position(|t| t == task).expect("present");
        groups.insert(task_group(model, task, &batch.targets[row])?);
    }

    let mut g = Graph::with_seed(Mode::Train, batch.dropout_seed);
    let x = g.input(batch.images.clone());
    let value = batch_loss(model, &mut g, model.weights(), x, &batch.tasks, &batch.targets, options)?;
    let total = g.value(value.total).item()?.as_f64();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: adam.step_count() + 1,
            tasks: present,
        });
    }
    model.store.zero_grad();
    g.backward(value.total, &mut model.store)?;
    let mut selected: BTreeSet<ParamId> = model.groups()[ENCODER].iter().copied().collect();
    for group in &groups {
        selected.extend(model.groups()[group].iter().copied());
    }
    let updated = adam.step_selected(&mut model.store, lr, |id| selected.contains(&id))?;
    model.commit_batch_stats(&g);
    let updated_groups: BTreeSet<String> = updated
        .iter()
        .filter_map(|id| model.group_of(*id).map(str::to_string))
        .collect();
    Ok(StepReport {
        loss: total,
        per_task: value.per_task,
        counts: value.counts,
        tasks_present: present,
        updated_groups: updated_groups.into_iter().collect(),
    })
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub super_task: String,
    pub tasks_present: Vec<String>,
    pub per_task_loss: BTreeMap<String, f64>,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}.ckpt"))
}

/// Sampler over the prepared tasks with the configured super-task mix.
pub fn build_sampler(config: &TrainConfig, tasks: &BTreeMap<String, PreparedTask>) -> Result<Sampler> {
    let refs = tasks
        .values()
        .map(|t| {
            (
                TaskDatasetRef {
                    task: t.task.clone(),
                    super_task: t.super_task.clone(),
                    samples: (0..t.samples.len()).collect(),
                    patients: t.patients.clone(),
                    weight: 1.0,
                },
                t.input,
            )
        })
        .collect();
    sampler_for(config, refs)
}

/// Sampler over datasets given with their input sizes. Super tasks without
/// data are dropped and the remaining probabilities renormalised.
pub fn sampler_for(config: &TrainConfig, datasets: Vec<(TaskDatasetRef, [usize; 2])>) -> Result<Sampler> {
    let mut super_tasks: Vec<SuperTask> = Vec::new();
    for (t, input) in &datasets {
        match super_tasks.iter_mut().find(|s| s.id == t.super_task) {
            Some(s) if s.input != *input => {
                return Err(Error::invalid(format!(
                    "task {} input {:?} differs from super task {} input {:?}",
                    t.task, input, s.id, s.input
                )))
            }
            Some(s) => s.tasks.push(t.task.clone()),
            None => super_tasks.push(SuperTask {
                id: t.super_task.clone(),
                input: *input,
                tasks: vec![t.task.clone()],
                probability: 0.0,
            }),
        }
    }
    if super_tasks.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    for s in &mut super_tasks {
        s.probability = *config
            .super_task_probabilities
            .get(&s.id)
            .ok_or_else(|| Error::Config(format!("no selection probability for super task {}", s.id)))?;
    }
    let total: f64 = super_tasks.iter().map(|s| s.probability).sum();
    if total <= 0.0 {
        return Err(Error::Config("super tasks with data all have probability 0".into()));
    }
    for s in &mut super_tasks {
        s.probability /= total;
    }
    let sampler = Sampler {
        super_tasks,
        datasets: datasets.into_iter().map(|(d, _)| d).collect(),
        mode: config.mode,
        batch_size: config.batch_size,
    };
    sampler.check()?;
    Ok(sampler)
}

#[derive(Default)]
pub struct TrainRun<'a> {
    /// Where the log and checkpoints go; nothing is written without it.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub model: ModelGraph,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub log: Vec<StepLog>,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    seed: u64,
    /// ChaCha word position, decimal.
    rng_word_pos: String,
    config: TrainConfig,
}

/// Training configuration stored in a checkpoint written by [`train`].
pub fn checkpoint_train_config(ckpt: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value::<ResumeState>(ckpt.extra.clone()).ok().map(|s| s.config)
}

fn resume_state(ckpt: &Checkpoint, config: &TrainConfig) -> Result<ChaCha8Rng> {
    let state: ResumeState = serde_json::from_value(ckpt.extra.clone()).map_err(|e| Error::Json {
        context: "checkpoint training state".into(),
        source: e,
    })?;
    if state.seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, config says {}",
            state.seed, config.seed
        )));
    }
    let pos: u128 = state
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Config(format!("bad rng position {:?} in checkpoint", state.rng_word_pos)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn write_log_prefix(path: &Path, keep_through: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<StepLog>(l).is_ok_and(|r| r.step <= keep_through))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs `config.steps` steps (or the remainder after `run.resume`).
pub fn train(
    config: &TrainConfig,
    tasks: &BTreeMap<String, PreparedTask>,
    model: ModelGraph,
    run: TrainRun<'_>,
) -> Result<TrainOutcome> {
    config.check()?;
    let sampler = build_sampler(config, tasks)?;
    let (mut model, mut adam, mut step, mut rng) = match run.resume {
        Some(ckpt) => {
            let rng = resume_state(&ckpt, config)?;
            (ckpt.model, ckpt.adam, ckpt.step, rng)
        }
        None => (model, AdamState::new(config.adam), 0, ChaCha8Rng::seed_from_u64(config.seed)),
    };
    let mut log_file = match run.out_dir {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join(LOG_FILE);
            if step > 0 {
                write_log_prefix(&path, step)?;
            } else if path.exists() {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let options = StepOptions {
        agg: config.loss_agg,
        dice_eps: config.targets.dice_eps,
    };
    let snapshot = |model: &ModelGraph, adam: &AdamState<f32>, step: u64, rng: &ChaCha8Rng| Checkpoint {
        model: model.clone(),
        adam: adam.clone(),
        step,
        extra: serde_json::to_value(ResumeState {
            seed: config.seed,
            rng_word_pos: rng.get_word_pos().to_string(),
            config: config.clone(),
        })
        .expect("state serializes"),
    };
    let mut log = Vec::new();
    while step < config.steps {
        let plan = sampler.next_batch(&mut rng)?;
        let batch = TrainBatch::assemble(&plan, tasks, &mut rng, &config.augment)?;
        let lr = config.lr.at(step);
        let report = train_step(&mut model, &mut adam, &batch, lr, options).map_err(|e| match e {
            Error::NonFiniteLoss { tasks, .. } => Error::NonFiniteLoss { step: step + 1, tasks },
            other => other,
        })?;
        step += 1;
        let record = StepLog {
            step,
            super_task: plan.super_task.clone(),
            tasks_present: report.tasks_present,
            per_task_loss: report.per_task,
            loss: report.loss,
            lr,
        };
        if let Some((path, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("log serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if step % 100 == 0 || step == config.steps {
            info!("step {step}/{} loss {:.4}", config.steps, record.loss);
        }
        log.push(record);
        if let Some(out) = run.out_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.steps {
                save_checkpoint(&checkpoint_path(out, step), &snapshot(&model, &adam, step, &rng))?;
            }
        }
    }
    if let Some(out) = run.out_dir {
        save_checkpoint(&out.join(FINAL_CHECKPOINT), &snapshot(&model, &adam, step, &rng))?;
    }
    Ok(TrainOutcome { model, adam, step, log })
}
