//! Task sampling.
//!
//! Tasks are grouped into super tasks that share an input size. Every batch
//! first draws a super task, then either one task for the whole batch
//! (fixed) or one task per slot (mixed); samples are drawn uniformly with
//! replacement from the chosen task's dataset.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Sample, TaskData};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    Fixed,
    #[default]
    Mixed,
}

/// One task's dataset as seen by the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDatasetRef {
    pub task: String,
    pub super_task: String,
    /// Indices into the task's sample list that may be drawn.
    pub samples: Vec<usize>,
    /// Source patient of each entry of `samples`.
    pub patients: Vec<u32>,
    /// Unnormalised selection weight p_t within the super task.
    pub weight: f64,
}

impl TaskDatasetRef {
    /// Every sample of `data`, with weight 1.
    pub fn from_task_data(data: &TaskData) -> Self {
        TaskDatasetRef {
            task: data.manifest.task_id.clone(),
            super_task: data.manifest.super_task_id.clone(),
            samples: (0..data.samples.len()).collect(),
            patients: data.samples.iter().map(|s| s.patient).collect(),
            weight: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        self.samples[rng.random_range(0..self.samples.len())]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperTask {
    pub id: String,
    pub input: [usize; 2],
    pub tasks: Vec<String>,
    pub probability: f64,
}

/// Sample indices chosen for one batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub super_task: String,
    pub mode: BatchMode,
    /// `(task, sample index)` per slot.
    pub slots: Vec<(String, usize)>,
}

impl BatchPlan {
    pub fn tasks(&self) -> Vec<&str> {
        self.slots.iter().map(|(t, _)| t.as_str()).collect()
    }

    /// Distinct tasks in first-appearance order.
    pub fn distinct_tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (t, _) in &self.slots {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}

fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn check_probabilities(super_tasks: &[SuperTask]) -> Result<()> {
    if super_tasks.is_empty() {
        return Err(Error::invalid("no super tasks to select from"));
    }
    if let Some(s) = super_tasks.iter().find(|s| !(s.probability >= 0.0 && s.probability.is_finite())) {
        return Err(Error::invalid(format!("super task {} has probability {}", s.id, s.probability)));
    }
    let total: f64 = super_tasks.iter().map(|s| s.probability).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("super task probabilities sum to {total}, not 1")));
    }
    Ok(())
}

pub fn select_super_task<'a>(rng: &mut ChaCha8Rng, super_tasks: &'a [SuperTask]) -> Result<&'a SuperTask> {
    check_probabilities(super_tasks)?;
    let w: Vec<f64> = super_tasks.iter().map(|s| s.probability).collect();
    Ok(&super_tasks[categorical(rng, &w)])
}

/// Member datasets of `super_task` that can be drawn from, with their weights.
fn members<'a>(datasets: &'a [TaskDatasetRef], super_task: &SuperTask) -> Result<(Vec<&'a TaskDatasetRef>, Vec<f64>)> {
    let live: Vec<&TaskDatasetRef> = super_task
        .tasks
        .iter()
        .filter_map(|t| datasets.iter().find(|d| &d.task == t))
        .filter(|d| !d.is_empty() && d.weight > 0.0)
        .collect();
    if live.is_empty() {
        return Err(Error::invalid(format!("super task {} has no task with data", super_task.id)));
    }
    let w = live.iter().map(|d| d.weight).collect();
    Ok((live, w))
}

pub fn sample_fixed_batch(rng: &mut ChaCha8Rng, datasets: &[TaskDatasetRef], super_task: &SuperTask, n: usize) -> Result<BatchPlan> {
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let (live, w) = members(datasets, super_task)?;
    let d = live[categorical(rng, &w)];
    let slots = (0..n).map(|_| (d.task.clone(), d.draw(rng))).collect();
    Ok(BatchPlan {
        super_task: super_task.id.clone(),
        mode: BatchMode::Fixed,
        slots,
    })
}

pub fn sample_mixed_batch(rng: &mut ChaCha8Rng, datasets: &[TaskDatasetRef], super_task: &SuperTask, n: usize) -> Result<BatchPlan> {
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let (live, w) = members(datasets, super_task)?;
    let slots = (0..n)
        .map(|_| {
            let d = live[categorical(rng, &w)];
            (d.task.clone(), d.draw(rng))
        })
        .collect();
    Ok(BatchPlan {
        super_task: super_task.id.clone(),
        mode: BatchMode::Mixed,
        slots,
    })
}

/// Super tasks plus datasets: the full sampling front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub super_tasks: Vec<SuperTask>,
    pub datasets: Vec<TaskDatasetRef>,
    pub mode: BatchMode,
    pub batch_size: usize,
}

impl Sampler {
    pub fn check(&self) -> Result<()> {
        check_probabilities(&self.super_tasks)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for s in &self.super_tasks {
            if s.tasks.is_empty() {
                return Err(Error::invalid(format!("super task {} has no member tasks", s.id)));
            }
            if s.probability > 0.0 {
                members(&self.datasets, s)?;
            }
        }
        Ok(())
    }

    pub fn next_batch(&self, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
        let st = select_super_task(rng, &self.super_tasks)?;
        match self.mode {
            BatchMode::Fixed => sample_fixed_batch(rng, &self.datasets, st, self.batch_size),
            BatchMode::Mixed => sample_mixed_batch(rng, &self.datasets, st, self.batch_size),
        }
    }

    /// One super task per distinct super-task id of `data`, all tasks weighted equally.
    pub fn from_tasks(
        data: &BTreeMap<String, TaskData>,
        probabilities: &BTreeMap<String, f64>,
        mode: BatchMode,
        batch_size: usize,
    ) -> Result<Sampler> {
        let datasets: Vec<TaskDatasetRef> = data.values().map(TaskDatasetRef::from_task_data).collect();
        let mut super_tasks: Vec<SuperTask> = Vec::new();
        for (task, d) in data {
            let id = &d.manifest.super_task_id;
            match super_tasks.iter_mut().find(|s| &s.id == id) {
                Some(s) => {
                    if s.input != d.manifest.input {
                        return Err(Error::invalid(format!(
                            "task {task} input {:?} differs from super task {id} input {:?}",
                            d.manifest.input, s.input
                        )));
                    }
                    s.tasks.push(task.clone());
                }
                None => super_tasks.push(SuperTask {
                    id: id.clone(),
                    input: d.manifest.input,
                    tasks: vec![task.clone()],
                    probability: 0.0,
                }),
            }
        }
        for s in &mut super_tasks {
            s.probability = *probabilities
                .get(&s.id)
                .ok_or_else(|| Error::invalid(format!("no probability for super task {}", s.id)))?;
        }
        if let Some(extra) = probabilities.keys().find(|k| !super_tasks.iter().any(|s| &s.id == *k)) {
            return Err(Error::invalid(format!("probability given for unknown super task {extra}")));
        }
        let sampler = Sampler {
            super_tasks,
            datasets,
            mode,
            batch_size,
        };
        sampler.check()?;
        Ok(sampler)
    }

    /// Probability that a slot carries `task`, marginalised over super tasks.
    pub fn slot_probability(&self, task: &str) -> f64 {
        self.super_tasks
            .iter()
            .map(|s| match members(&self.datasets, s) {
                Ok((live, w)) => {
                    let total: f64 = w.iter().sum();
                    live.iter()
                        .zip(&w)
                        .filter(|(d, _)| d.task == task)
                        .map(|(_, w)| s.probability * w / total)
                        .sum()
                }
                Err(_) => 0.0,
            })
            .sum()
    }
}

/// A planned batch with its images and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    /// `[N,3,H,W]`.
    pub images: Tensor<f32>,
    pub tasks: Vec<String>,
    pub samples: Vec<Sample>,
    pub mode: BatchMode,
    pub super_task: String,
}

impl TaskBatch {
    /// Gathers the planned samples; every image must have the same extent.
    pub fn assemble(plan: &BatchPlan, data: &BTreeMap<String, TaskData>) -> Result<TaskBatch> {
        let mut samples = Vec::with_capacity(plan.slots.len());
        for (task, i) in &plan.slots {
            let d = data.get(task).ok_or_else(|| Error::invalid(format!("no data for task {task}")))?;
            let s = d
                .samples
                .get(*i)
                .ok_or_else(|| Error::invalid(format!("task {task} has no sample {i}")))?;
            samples.push(s.clone());
        }
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch plan"))?;
        let shape = first.image.shape().to_vec();
        let mut pixels = Vec::with_capacity(samples.len() * first.image.numel());
        for s in &samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "sample {} has shape {:?}, batch expects {shape:?}",
                    s.id,
                    s.image.shape()
                )));
            }
            pixels.extend_from_slice(s.image.data());
        }
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(&shape);
        Ok(TaskBatch {
            images: Tensor::new(dims, pixels)?,
            tasks: plan.slots.iter().map(|(t, _)| t.clone()).collect(),
            samples,
            mode: plan.mode,
            super_task: plan.super_task.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

fn chi_square(observed: &[(f64, f64)]) -> ChiSquare {
    let cells: Vec<_> = observed.iter().filter(|(_, e)| *e > 0.0).collect();
    ChiSquare {
        statistic: cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum(),
        dof: cells.len().saturating_sub(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub batches: usize,
    pub slots: usize,
    pub super_task_counts: BTreeMap<String, usize>,
    pub super_task_expected: BTreeMap<String, f64>,
    pub task_slot_counts: BTreeMap<String, usize>,
    pub task_slot_expected: BTreeMap<String, f64>,
    /// Number of batches by how many distinct tasks they contain.
    pub distinct_task_histogram: BTreeMap<usize, usize>,
    /// Mean number of slots per batch for each task, over batches of its super task.
    pub mean_count_per_batch: BTreeMap<String, f64>,
    pub super_task_chi_square: ChiSquare,
    pub task_chi_square: ChiSquare,
}

impl SamplerStats {
    pub fn slot_frequency(&self, task: &str) -> f64 {
        self.task_slot_counts.get(task).copied().unwrap_or(0) as f64 / self.slots.max(1) as f64
    }

    pub fn super_task_frequency(&self, id: &str) -> f64 {
        self.super_task_counts.get(id).copied().unwrap_or(0) as f64 / self.batches.max(1) as f64
    }
}

pub fn sampler_stats(rng: &mut ChaCha8Rng, sampler: &Sampler, draws: usize) -> Result<SamplerStats> {
    if draws == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    sampler.check()?;
    let mut super_counts: BTreeMap<String, usize> = sampler.super_tasks.iter().map(|s| (s.id.clone(), 0)).collect();
    let mut task_counts: BTreeMap<String, usize> = sampler.datasets.iter().map(|d| (d.task.clone(), 0)).collect();
    let mut hist = BTreeMap::new();
    for _ in 0..draws {
        let plan = sampler.next_batch(rng)?;
        *super_counts.entry(plan.super_task.clone()).or_default() += 1;
        for (t, _) in &plan.slots {
            *task_counts.entry(t.clone()).or_default() += 1;
        }
        *hist.entry(plan.distinct_tasks().len()).or_default() += 1;
    }
    let slots = draws * sampler.batch_size;
    let super_expected: BTreeMap<String, f64> =
        sampler.super_tasks.iter().map(|s| (s.id.clone(), s.probability * draws as f64)).collect();
    let task_expected: BTreeMap<String, f64> = task_counts
        .keys()
        .map(|t| (t.clone(), sampler.slot_probability(t) * slots as f64))
        .collect();
    let mean_count_per_batch = task_counts
        .iter()
        .map(|(t, c)| {
            let own: usize = sampler
                .super_tasks
                .iter()
                .filter(|s| s.tasks.contains(t))
                .map(|s| super_counts[&s.id])
                .sum();
            (t.clone(), *c as f64 / own.max(1) as f64)
        })
        .collect();
    let pair = |counts: &BTreeMap<String, usize>, expected: &BTreeMap<String, f64>| -> Vec<(f64, f64)> {
        counts.iter().map(|(k, c)| (*c as f64, expected.get(k).copied().unwrap_or(0.0))).collect()
    };
    Ok(SamplerStats {
        batches: draws,
        slots,
        super_task_chi_square: chi_square(&pair(&super_counts, &super_expected)),
        task_chi_square: chi_square(&pair(&task_counts, &task_expected)),
        super_task_counts: super_counts,
        super_task_expected: super_expected,
        task_slot_counts: task_counts,
        task_slot_expected: task_expected,
        distinct_task_histogram: hist,
        mean_count_per_batch,
    })
}
