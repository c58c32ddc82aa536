//! Subcommand implementations. Each returns an [`Outcome`]; failures that
//! stop a command early come back as errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cerberus::autodiff::{gradcheck, GradcheckConfig, GradcheckReport, Mode, Tensor};
use cerberus::data::scene::splitmix64;
use cerberus::data::{
    generate_corpus, manifest_path, read_container, write_container, write_corpus, Container, CorpusReport, CorpusSpec,
    DatasetManifest, TaskData, TaskKind, NUCLEI, SEGMENTATION, TISSUE,
};
use cerberus::instances::{majority_vote_subtype, recover_instances, InstanceMap};
use cerberus::metrics::{froc_area, FrocConfig, MetricReport, REPORT_SCHEMA_VERSION};
use cerberus::model::{load_checkpoint, ModelGraph, SubtypeSpec, Weights, SUBTYPE};
use cerberus::sampler::{sampler_stats, BatchMode, SamplerStats, TaskDatasetRef};
use cerberus::trainer::{
    batch_loss, checkpoint_train_config, evaluate_classification, evaluate_segmentation, evaluate_subtype,
    prepare_subtype_task, prepare_task, refine_loop, sampler_for, subtype_classes, train, PreparedTarget, RefineConfig,
    RefineReport, RefineState, StepOptions, TargetConfig, Tile, TrainRun, FINAL_CHECKPOINT,
};
use cerberus::{Error, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_seed, RunConfig};
use crate::tiling::{plan_tiles, predict_tiled, worker_count, TilePlan};

/// Result of a command that ran to completion.
#[derive(Debug)]
pub struct Outcome {
    /// All checks the command makes were within tolerance.
    pub passed: bool,
    pub summary: String,
}

impl Outcome {
    fn pass(summary: impl Into<String>) -> Self {
        Outcome {
            passed: true,
            summary: summary.into(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
            Ok(())
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const GEN_REPORT: &str = "gen_report.json";

pub fn gen_data(spec: Option<&Path>, out: &Path, scenes: usize, seed: u64) -> Result<Outcome> {
    let spec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, CorpusSpec>(de).map_err(|e| {
                Error::Config(format!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))
            })?
        }
        None => CorpusSpec::default(),
    };
    if scenes == 0 {
        return Err(Error::InvalidArgument("--scenes must be at least 1".into()));
    }
    let report: CorpusReport = write_corpus(out, &spec, scenes, seed)?;
    write_json(&out.join(GEN_REPORT), &report)?;
    let bad = report.violation_count();
    for v in &report.scene_violations {
        warn!("{v}");
    }
    for r in &report.validation {
        for v in &r.violations {
            warn!("{}: {:?} {}", r.task, v.kind, v.message);
        }
    }
    Ok(Outcome {
        passed: bad == 0,
        summary: format!("{scenes} scenes, {} manifests, {bad} violations", report.manifests.len()),
    })
}

/// Loads the listed tasks of a dataset, restricted to `folds` when given.
pub fn load_tasks(root: &Path, tasks: &[String], folds: Option<&[usize]>) -> Result<BTreeMap<String, TaskData>> {
    tasks
        .iter()
        .map(|t| {
            let manifest = DatasetManifest::load(&manifest_path(root, t))?;
            Ok((t.clone(), TaskData::load(root, &manifest, folds)?))
        })
        .collect()
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("field `data.root`: a dataset root is required".into()))
}

/// Every metric the model supports on the given data.
pub fn evaluate_all(model: &ModelGraph, data: &BTreeMap<String, TaskData>, targets: &TargetConfig) -> Result<MetricReport> {
    let mut report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        segmentation: Vec::new(),
        subtype: None,
        classification: None,
        froc: None,
    };
    for (task, d) in data {
        if d.samples.is_empty() {
            continue;
        }
        match d.manifest.kind {
            TaskKind::Segmentation if model.has_task(task) => {
                report.segmentation.push(evaluate_segmentation(model, d, targets.scheme(task))?.0);
            }
            TaskKind::Classification if model.config.head.is_some() => {
                report.classification = Some(evaluate_classification(model, d)?);
            }
            _ => {}
        }
    }
    if let Some(spec) = &model.config.subtype {
        if let Some(d) = data.get(&spec.parent).filter(|d| d.samples.iter().all(|s| s.instances().is_some_and(|m| m.classes().is_some()))) {
            if !d.samples.is_empty() {
                let (sub, froc) = evaluate_subtype(model, d, targets.scheme(&spec.parent))?;
                report.subtype = Some(sub);
                report.froc = Some(froc_area(&froc, &FrocConfig::default())?);
            }
        }
    }
    Ok(report)
}

#[derive(Serialize)]
struct TrainReport {
    step: u64,
    final_loss: Option<f64>,
    tasks: Vec<String>,
    /// Metrics on the training data after the last step.
    training: MetricReport,
}

pub const TRAIN_REPORT: &str = "train_report.json";

pub fn train_cmd(config: &Path, out: &Path, resume: Option<&Path>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let root = data_root(&cfg)?;
    let train_cfg = cfg.train_config();
    let (data, model, prepared) = match &cfg.subtype {
        Some(sub) => {
            let data = load_tasks(root, &[sub.parent.clone()], cfg.data.folds.as_deref())?;
            let base = load_checkpoint(&sub.base_checkpoint, None)?;
            let mut model = base.model;
            model.attach_subtype_decoder(&sub.parent, sub.classes, sub.variant, derive_seed(cfg.seed, "subtype"))?;
            let task = prepare_subtype_task(&data[&sub.parent], sub.classes)?;
            (data, model, BTreeMap::from([(SUBTYPE.to_string(), task)]))
        }
        None => {
            let data = load_tasks(root, &cfg.data.tasks, cfg.data.folds.as_deref())?;
            let model = ModelGraph::build(&cfg.model, derive_seed(cfg.seed, "model"))?;
            let prepared = data
                .iter()
                .map(|(t, d)| Ok((t.clone(), prepare_task(d, &train_cfg.targets)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            (data, model, prepared)
        }
    };
    let resume = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, None)?;
            if ckpt.model.config.digest() != model.config.digest() {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different architecture",
                    path.display()
                )));
            }
            info!("resuming from step {}", ckpt.step);
            Some(ckpt)
        }
        None => None,
    };
    let outcome = train(
        &train_cfg,
        &prepared,
        model,
        TrainRun {
            out_dir: Some(out),
            resume,
        },
    )?;
    let training = evaluate_all(&outcome.model, &data, &train_cfg.targets)?;
    let report = TrainReport {
        step: outcome.step,
        final_loss: outcome.log.last().map(|r| r.loss),
        tasks: prepared.keys().cloned().collect(),
        training,
    };
    write_json(&out.join(TRAIN_REPORT), &report)?;
    Ok(Outcome::pass(format!(
        "trained to step {}; checkpoint {}",
        outcome.step,
        out.join(FINAL_CHECKPOINT).display()
    )))
}

/// `all`, or comma-separated `fold<k>` names.
pub fn parse_split(split: &str) -> Result<Option<Vec<usize>>> {
    if split == "all" {
        return Ok(None);
    }
    split
        .split(',')
        .map(|s| {
            s.trim()
                .strip_prefix("fold")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("split {s:?} is neither `all` nor `fold<k>`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    checkpoint_step: u64,
    audit: Vec<String>,
    metrics: MetricReport,
}

pub fn eval_cmd(checkpoint: &Path, dataset: &Path, split: &str, out: &Path, config: Option<&Path>) -> Result<Outcome> {
    let expected = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let mut model = cfg.model.clone();
            model.subtype = cfg.subtype.as_ref().map(|s| SubtypeSpec {
                parent: s.parent.clone(),
                classes: s.classes,
                variant: s.variant,
            });
            Some(model)
        }
        None => None,
    };
    let ckpt = load_checkpoint(checkpoint, expected.as_ref())?;
    let targets = checkpoint_train_config(&ckpt).map(|c| c.targets).unwrap_or_default();
    let folds = parse_split(split)?;
    let mut tasks: Vec<String> = ckpt.model.tasks();
    if ckpt.model.config.head.is_some() {
        tasks.push(TISSUE.into());
    }
    tasks.retain(|t| manifest_path(dataset, t).exists());
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset {} has no task the checkpoint can evaluate",
            dataset.display()
        )));
    }
    let data = load_tasks(dataset, &tasks, folds.as_deref())?;
    let metrics = evaluate_all(&ckpt.model, &data, &targets)?;
    let audit = metrics.audit();
    let csv = metrics.to_csv();
    let report = EvalReport {
        split: split.into(),
        checkpoint_step: ckpt.step,
        audit,
        metrics,
    };
    write_json(out, &report)?;
    let csv_path = out.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| io(&csv_path, e))?;
    let summary = report
        .metrics
        .segmentation
        .iter()
        .map(|s| format!("{} dice {:.4} pq {:.4}", s.task, s.dice, s.pq))
        .chain(report.metrics.classification.iter().map(|c| format!("{} accuracy {:.4}", c.task, c.accuracy)))
        .collect::<Vec<_>>()
        .join("; ");
    if !report.audit.is_empty() {
        for a in &report.audit {
            warn!("audit: {a}");
        }
        return Ok(Outcome {
            passed: false,
            summary: format!("{} audit mismatches; {summary}", report.audit.len()),
        });
    }
    Ok(Outcome::pass(summary))
}

#[derive(Serialize)]
struct InferReport {
    height: usize,
    width: usize,
    plan: TilePlan,
    /// Instance count per segmentation task.
    instances: BTreeMap<String, usize>,
    /// Majority-vote class per instance of the subtype parent.
    subtype_classes: Option<Vec<u32>>,
}

pub const INFER_REPORT: &str = "infer_report.json";

pub fn infer_cmd(checkpoint: &Path, image: &Path, tile: usize, overlap: usize, out: &Path) -> Result<Outcome> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let targets = checkpoint_train_config(&ckpt).map(|c| c.targets).unwrap_or_default();
    let model = ckpt.model;
    let img = read_container(image)?.into_image(&image.display().to_string())?;
    let [c, h, w] = img.shape() else {
        return Err(Error::InvalidArgument(format!("image shape {:?} is not [3,H,W]", img.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if c != model.config.in_channels {
        return Err(Error::InvalidArgument(format!("image has {c} channels, model expects {}", model.config.in_channels)));
    }
    let plan = plan_tiles(h, w, tile, overlap, model.config.downsampling(), model.config.receptive_radius())?;
    for note in &plan.warnings {
        warn!("{note}");
    }
    let probs = predict_tiled(&model, &img, &plan, worker_count())?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut instances = BTreeMap::new();
    let mut maps: BTreeMap<String, InstanceMap> = BTreeMap::new();
    for (task, p) in &probs {
        write_container(&out.join(format!("{task}.probs.cbrs")), &Container::from_tensor(p))?;
        if task == SUBTYPE {
            continue;
        }
        let map = recover_instances(p, targets.scheme(task))?;
        write_container(&out.join(format!("{task}.instances.cbrs")), &Container::from_instance_map(&map))?;
        instances.insert(task.clone(), map.count());
        maps.insert(task.clone(), map);
    }
    let subtype = match (&model.config.subtype, probs.get(SUBTYPE)) {
        (Some(spec), Some(p)) => Some(majority_vote_subtype(&maps[&spec.parent], &subtype_classes(p)?)?),
        _ => None,
    };
    let report = InferReport {
        height: h,
        width: w,
        plan,
        instances,
        subtype_classes: subtype,
    };
    write_json(&out.join(INFER_REPORT), &report)?;
    Ok(Outcome::pass(format!(
        "{} tiles ({:?}); instances {:?}",
        report.plan.tile_count(),
        report.plan.mode,
        report.instances
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, expected: f64, observed: f64, tolerance: f64) -> Check {
        Check {
            name: name.into(),
            expected,
            observed,
            tolerance,
            passed: (observed - expected).abs() <= tolerance,
        }
    }
}

fn verdict(checks: &[Check]) -> Outcome {
    let worst = checks
        .iter()
        .filter(|c| !c.passed)
        .max_by(|a, b| (a.observed - a.expected).abs().total_cmp(&(b.observed - b.expected).abs()));
    match worst {
        Some(c) => Outcome {
            passed: false,
            summary: format!(
                "{} of {} checks failed; worst {}: observed {:.6}, expected {:.6} ± {}",
                checks.iter().filter(|c| !c.passed).count(),
                checks.len(),
                c.name,
                c.observed,
                c.expected,
                c.tolerance
            ),
        },
        None => Outcome::pass(format!("{} checks passed", checks.len())),
    }
}

#[derive(Serialize)]
pub struct SamplerReport {
    pub mode: BatchMode,
    pub stats: SamplerStats,
    pub checks: Vec<Check>,
}

pub fn sampler_stats_cmd(config: &Path, draws: usize, tolerance: f64, out: Option<&Path>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let root = data_root(&cfg)?;
    let train_cfg = cfg.train_config();
    let mut refs = Vec::new();
    for t in &cfg.data.tasks {
        let m = DatasetManifest::load(&manifest_path(root, t))?;
        let samples = m.samples_in(cfg.data.folds.as_deref().unwrap_or(&(0..m.folds).collect::<Vec<_>>()));
        refs.push((
            TaskDatasetRef {
                task: t.clone(),
                super_task: m.super_task_id.clone(),
                samples: (0..samples.len()).collect(),
                patients: samples.iter().map(|s| s.patient).collect(),
                weight: 1.0,
            },
            m.input,
        ));
    }
    let sampler = sampler_for(&train_cfg, refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sampler-stats"));
    let stats = sampler_stats(&mut rng, &sampler, draws)?;
    let mut checks = Vec::new();
    for s in &sampler.super_tasks {
        checks.push(Check::new(
            format!("super task {} frequency", s.id),
            s.probability,
            stats.super_task_frequency(&s.id),
            tolerance,
        ));
        for t in &s.tasks {
            // share of the super task's slots; 1/T with equal weights
            let expected = sampler.slot_probability(t) / s.probability;
            let observed = stats.mean_count_per_batch[t] / sampler.batch_size as f64;
            checks.push(Check::new(format!("task {t} slot share"), expected, observed, tolerance));
        }
    }
    if sampler.mode == BatchMode::Fixed {
        let single = stats.distinct_task_histogram.get(&1).copied().unwrap_or(0) as f64 / stats.batches as f64;
        checks.push(Check::new("fixed batches with one task", 1.0, single, 0.0));
    }
    let outcome = verdict(&checks);
    emit(
        out,
        &SamplerReport {
            mode: sampler.mode,
            stats,
            checks,
        },
    )?;
    Ok(outcome)
}

/// Random mixed batch touching every branch: one row per segmentation task,
/// one subtype row and one classification row.
fn gradcheck_batch(model: &ModelGraph, input: [usize; 2], subtype_classes: usize, seed: u64) -> (Tensor<f32>, Vec<String>, Vec<PreparedTarget>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = input;
    let hw = h * w;
    let mut tasks = Vec::new();
    let mut targets = Vec::new();
    for d in &model.config.decoders {
        tasks.push(d.task.clone());
        targets.push(PreparedTarget::Pixels {
            classes: (0..hw).map(|_| rng.random_range(0..d.classes as u32)).collect(),
            weights: Some((0..hw).map(|_| rng.random_range(1.0..4.0)).collect()),
        });
    }
    if model.config.subtype.is_some() {
        tasks.push(SUBTYPE.into());
        targets.push(PreparedTarget::Subtype {
            classes: (0..hw).map(|_| rng.random_range(0..subtype_classes as u32)).collect(),
            fg: (0..hw).map(|_| rng.random_bool(0.5)).collect(),
        });
    }
    if let Some(head) = &model.config.head {
        tasks.push(TISSUE.into());
        targets.push(PreparedTarget::Label(rng.random_range(0..head.classes as u32)));
    }
    let x = Tensor::from_fn(&[tasks.len(), model.config.in_channels, h, w], |_| rng.random_range(0.0..1.0));
    (x, tasks, targets)
}

/// Central-difference check of the full model under the training loss.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let gc = &cfg.gradcheck;
    let mut model = ModelGraph::build(&cfg.model, derive_seed(cfg.seed, "model"))?;
    if model.config.subtype.is_none() && !model.config.decoders.is_empty() {
        let parent = model
            .config
            .decoders
            .iter()
            .find(|d| d.task == NUCLEI)
            .unwrap_or(&model.config.decoders[0])
            .task
            .clone();
        model.attach_subtype_decoder(&parent, gc.subtype_classes, gc.subtype_variant, derive_seed(cfg.seed, "subtype"))?;
    }
    for g in model.groups().keys().cloned().collect::<Vec<_>>() {
        model.set_group_trainable(&g, true);
    }
    // dropout masks would differ between the perturbed evaluations
    let model = model.without_dropout();
    let (x, tasks, targets) = gradcheck_batch(&model, gc.input, gc.subtype_classes, derive_seed(cfg.seed, "gradcheck-batch"));
    let x = x.cast::<f64>();
    let mut store = model.store.cast::<f64>();
    let running: Vec<_> = model.running.iter().map(|r| r.cast::<f64>()).collect();
    let options = StepOptions {
        agg: cfg.trainer.loss_agg,
        dice_eps: cfg.trainer.targets.dice_eps,
    };
    let check = GradcheckConfig {
        step: gc.step,
        tolerance: gc.tolerance,
        coords_per_param: gc.coords_per_param,
        seed: derive_seed(cfg.seed, "gradcheck-coords"),
        mode: Mode::Train,
    };
    gradcheck(&mut store, &check, |g, s| {
        let w = Weights { store: s, running: &running };
        let xn = g.input(x.clone());
        Ok(batch_loss(&model, g, w, xn, &tasks, &targets, options)?.total)
    })
}

pub fn gradcheck_cmd(config: &Path, out: Option<&Path>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let report = run_gradcheck(&cfg)?;
    emit(out, &report)?;
    let unchecked: Vec<&str> = report.params.iter().filter(|p| p.checked == 0).map(|p| p.name.as_str()).collect();
    let summary = format!(
        "{} parameter tensors, max relative error {:.3e} (tolerance {:.0e}), worst {}",
        report.params.len(),
        report.max_rel_error,
        report.tolerance,
        report.worst_param.as_deref().unwrap_or("-")
    );
    Ok(if report.passed {
        Outcome::pass(summary)
    } else {
        Outcome {
            passed: false,
            summary: if unchecked.is_empty() { summary } else { format!("{summary}; no usable coordinates in {unchecked:?}") },
        }
    })
}

#[derive(Serialize)]
pub struct RefineSimReport {
    pub rounds: usize,
    pub k_per_round: usize,
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub report: RefineReport,
    pub checks: Vec<Check>,
}

/// Ground truth with each instance dropped with probability `noise`,
/// decided by hashing tile and instance.
fn noisy_labels(truth: &InstanceMap, tile: usize, noise: f64, seed: u64) -> Result<InstanceMap> {
    if noise <= 0.0 {
        return Ok(truth.clone());
    }
    let mut remap = vec![0u32; truth.count() + 1];
    let mut next = 0;
    for id in 1..=truth.count() {
        let h = splitmix64(seed ^ splitmix64(((tile as u64) << 32) | id as u64));
        if (h >> 11) as f64 / (1u64 << 53) as f64 >= noise {
            next += 1;
            remap[id] = next;
        }
    }
    InstanceMap::new(truth.height(), truth.width(), truth.ids().iter().map(|&v| remap[v as usize]).collect())
}

fn task_map(scene: &cerberus::data::Scene, task: &str) -> Result<InstanceMap> {
    Ok(match task {
        cerberus::data::GLANDS => scene.glands.clone(),
        cerberus::data::LUMEN => scene.lumen.clone(),
        NUCLEI => scene.nuclei.clone(),
        other => return Err(Error::Config(format!("field `refine.task`: {other:?} is not a segmentation task"))),
    })
}

pub fn run_refine(cfg: &RunConfig, rounds: usize, k: usize) -> Result<RefineSimReport> {
    let r = &cfg.refine;
    let scenes = generate_corpus(&r.corpus, r.pool_tiles + r.validation_tiles, derive_seed(cfg.seed, "refine-corpus"))?;
    let tiles: Vec<Tile> = scenes
        .iter()
        .enumerate()
        .map(|(id, s)| {
            Ok(Tile {
                id,
                image: s.image.clone(),
                truth: task_map(s, &r.task)?,
            })
        })
        .collect::<Result<_>>()?;
    let (pool, validation) = tiles.split_at(r.pool_tiles);
    let state = RefineState::new((0..r.initial_labelled).collect(), (r.initial_labelled..r.pool_tiles).collect())?;
    let mut train = cfg.train_config();
    train.super_task_probabilities = BTreeMap::from([(SEGMENTATION.to_string(), 1.0)]);
    let refine = RefineConfig {
        task: r.task.clone(),
        super_task: SEGMENTATION.into(),
        scheme: r.scheme,
        rounds,
        k_per_round: k,
        min_gain: r.min_gain,
        warm_start: r.warm_start,
        train,
    };
    let noise_seed = derive_seed(cfg.seed, "refine-noise");
    let model_seed = derive_seed(cfg.seed, "refine-model");
    let (state, report) = refine_loop(
        state,
        pool,
        validation,
        &refine,
        |round| ModelGraph::build(&cfg.model, model_seed.wrapping_add(round as u64)),
        |t| noisy_labels(&t.truth, t.id, r.label_noise, noise_seed).expect("relabelled map is valid"),
    )?;
    let mut checks = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for round in &report.rounds {
        if best.is_finite() {
            let drop = (best - round.validation_dice).max(0.0);
            checks.push(Check::new(
                format!("round {} validation Dice drop below best", round.round),
                0.0,
                drop,
                r.monotone_slack,
            ));
        }
        best = best.max(round.validation_dice);
        let mut sorted = round.ranking.clone();
        sorted.sort_by(|a, b| a.dice.total_cmp(&b.dice).then(a.id.cmp(&b.id)));
        let lowest: Vec<usize> = sorted.iter().take(k).map(|t| t.id).collect();
        let mismatch = if round.ranking.is_empty() || lowest == round.extracted { 0.0 } else { 1.0 };
        checks.push(Check::new(format!("round {} extracted the k lowest", round.round), 0.0, mismatch, 0.0));
    }
    Ok(RefineSimReport {
        rounds,
        k_per_round: k,
        labelled: state.labelled,
        unlabelled: state.unlabelled,
        report,
        checks,
    })
}

pub fn refine_sim_cmd(config: &Path, rounds: usize, k: usize, out: Option<&Path>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let report = run_refine(&cfg, rounds, k)?;
    let mut outcome = verdict(&report.checks);
    let dice: Vec<String> = report.report.rounds.iter().map(|r| format!("{:.4}", r.validation_dice)).collect();
    outcome.summary = format!(
        "{} rounds, stop {:?}, validation Dice [{}]; {}",
        report.report.rounds.len(),
        report.report.stop,
        dice.join(", "),
        outcome.summary
    );
    emit(out, &report)?;
    Ok(outcome)
}

/// Path of the CSV written next to an eval report.
pub fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}
