use std::collections::BTreeMap;

use cerberus::autodiff::{AdamConfig, AdamState, Tensor};
use cerberus::data::{generate_corpus, CorpusSpec, Scene, TaskData, GLANDS, LUMEN, NUCLEI, SEGMENTATION, SEG_TASKS, TISSUE};
use cerberus::instances::{InstanceMap, Recovery};
use cerberus::model::{decoder_group, load_checkpoint, ArchitectureConfig, HeadSpec, ModelGraph, ENCODER};
use cerberus::sampler::BatchMode;
use cerberus::trainer::{
    augment, checkpoint_path, gaussian_blur3, prepare_subtype_task, prepare_task, rank_regions_by_error, refine_loop,
    train, train_step, AugmentConfig, Geometric, PreparedSample, PreparedTarget, PreparedTask, RefineConfig,
    RefineState, StepOptions, StopReason, Tile, TrainBatch, TrainConfig, TrainRun, FINAL_CHECKPOINT, LOG_FILE,
};
use cerberus::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        stages: vec![4, 8],
        head: Some(HeadSpec {
            hidden: 8,
            dropout: 0.3,
            classes: 4,
        }),
        ..ArchitectureConfig::desk()
    }
}

fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    generate_corpus(&CorpusSpec::default(), n, seed).unwrap()
}

fn prepared(scenes: &[Scene], tasks: &[&str]) -> BTreeMap<String, PreparedTask> {
    let folds = vec![0; scenes.len()];
    tasks
        .iter()
        .map(|t| {
            let data = TaskData::from_scenes(t, scenes, &folds, 32).unwrap();
            (t.to_string(), prepare_task(&data, &Default::default()).unwrap())
        })
        .collect()
}

fn short_config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.steps = steps;
    cfg.lr.drop_step = steps / 2;
    cfg.batch_size = 4;
    cfg.checkpoint_every = 0;
    cfg
}

fn coordinate_sample(h: usize, w: usize) -> PreparedSample {
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let p = i % (h * w);
        match i / (h * w) {
            0 => (p / w) as f32 / h as f32,
            1 => (p % w) as f32 / w as f32,
            _ => 0.5,
        }
    });
    PreparedSample {
        id: "grid".into(),
        image,
        target: PreparedTarget::Pixels {
            classes: (0..(h * w) as u32).collect(),
            weights: Some((0..h * w).map(|p| p as f64).collect()),
        },
    }
}

#[test]
fn horizontal_flip_twice_is_identity() {
    let s = coordinate_sample(6, 5);
    let g = Geometric {
        flip_h: true,
        ..Geometric::default()
    };
    let once = g.apply_image(&s.image);
    assert_ne!(once, s.image);
    assert_eq!(g.apply_image(&once), s.image);
    let plane: Vec<u32> = (0..30).collect();
    assert_eq!(g.apply(&g.apply(&plane, 6, 5), 6, 5), plane);
}

#[test]
fn four_quarter_turns_are_identity() {
    let s = coordinate_sample(6, 5);
    let turn = Geometric {
        quarter_turns: 1,
        ..Geometric::default()
    };
    let mut img = s.image.clone();
    for i in 0..4 {
        img = turn.apply_image(&img);
        let expect: &[usize] = if i % 2 == 0 { &[3, 5, 6] } else { &[3, 6, 5] };
        assert_eq!(img.shape(), expect);
    }
    assert_eq!(img, s.image);
}

#[test]
fn quarter_turn_is_counter_clockwise() {
    // 2×3 plane [[0,1,2],[3,4,5]] turned left becomes [[2,5],[1,4],[0,3]]
    let g = Geometric {
        quarter_turns: 1,
        ..Geometric::default()
    };
    assert_eq!(g.apply(&[0, 1, 2, 3, 4, 5], 2, 3), vec![2, 5, 1, 4, 0, 3]);
}

#[test]
fn photometric_only_leaves_labels_bitwise_unchanged() {
    let scenes = scenes(2, 3);
    let tasks = prepared(&scenes, &[NUCLEI]);
    let cfg = AugmentConfig {
        flip: false,
        rotate: false,
        photometric_probability: 1.0,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &tasks[NUCLEI].samples {
        let out = augment(s, &mut rng, &cfg);
        assert_eq!(out.target, s.target);
        assert_ne!(out.image, s.image);
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn gaussian_blur_keeps_constant_images() {
    let img = Tensor::full(&[3, 4, 4], 0.25f32);
    let out = gaussian_blur3(&img, 0.8);
    assert!(out.max_abs_diff(&img) < 1e-7);
}

#[test]
fn geometric_augment_keeps_pixel_correspondence() {
    let (h, w) = (6, 8);
    let s = coordinate_sample(h, w);
    let cfg = AugmentConfig {
        gaussian_blur: false,
        median_blur: false,
        colour_jitter: false,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..64 {
        let out = augment(&s, &mut rng, &cfg);
        let (oh, ow) = (out.image.shape()[1], out.image.shape()[2]);
        seen.insert(out.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let PreparedTarget::Pixels { classes, weights } = &out.target else {
            panic!("pixel target expected")
        };
        let weights = weights.as_ref().unwrap();
        for p in 0..oh * ow {
            let src = classes[p] as usize;
            assert_eq!(out.image.data()[p], (src / w) as f32 / h as f32);
            assert_eq!(out.image.data()[oh * ow + p], (src % w) as f32 / w as f32);
            assert_eq!(weights[p], src as f64);
        }
    }
    // flips and quarter turns generate the 8 symmetries of the square
    assert_eq!(seen.len(), 8);
}

fn fixed_batch(tasks: &BTreeMap<String, PreparedTask>, task: &str, n: usize, rng: &mut ChaCha8Rng) -> TrainBatch {
    let t = &tasks[task];
    let slots = (0..n)
        .map(|_| (task.to_string(), t.samples[rng.random_range(0..t.samples.len())].clone()))
        .collect();
    TrainBatch::from_samples(slots, &t.super_task, BatchMode::Fixed, rng.random()).unwrap()
}

fn group_snapshot(model: &ModelGraph, group: &str) -> Vec<Vec<u32>> {
    model.groups()[group]
        .iter()
        .map(|id| model.store.get(*id).tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn fixed_batches_update_only_encoder_and_their_decoder() {
    let scenes = scenes(4, 11);
    let tasks = prepared(&scenes, &SEG_TASKS);
    let mut model = ModelGraph::build(&tiny_arch(), 2).unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..12 {
        let task = SEG_TASKS[rng.random_range(0..3)];
        let batch = fixed_batch(&tasks, task, 3, &mut rng);
        let before: BTreeMap<String, _> = model.groups().keys().map(|g| (g.clone(), group_snapshot(&model, g))).collect();
        let report = train_step(&mut model, &mut adam, &batch, 1e-3, StepOptions::default()).unwrap();
        assert_eq!(report.updated_groups, vec![decoder_group(task), ENCODER.to_string()]);
        assert_eq!(report.tasks_present, vec![task.to_string()]);
        for (g, snap) in &before {
            let changed = &group_snapshot(&model, g) != snap;
            let should = g == ENCODER || *g == decoder_group(task);
            assert_eq!(changed, should, "group {g} after a {task} batch");
        }
    }
}

#[test]
fn mixed_batch_updates_every_present_group() {
    let scenes = scenes(3, 12);
    let tasks = prepared(&scenes, &SEG_TASKS);
    let mut model = ModelGraph::build(&tiny_arch(), 2).unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    let slots = [GLANDS, LUMEN, NUCLEI, LUMEN]
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_string(), tasks[*t].samples[i % 3].clone()))
        .collect();
    let batch = TrainBatch::from_samples(slots, SEGMENTATION, BatchMode::Mixed, 0).unwrap();
    let report = train_step(&mut model, &mut adam, &batch, 1e-3, StepOptions::default()).unwrap();
    let mut expect: Vec<String> = SEG_TASKS.iter().map(|t| decoder_group(t)).collect();
    expect.push(ENCODER.into());
    expect.sort();
    assert_eq!(report.updated_groups, expect);
    assert_eq!(report.counts.values().sum::<usize>(), 4);
    assert_eq!(report.counts[LUMEN], 2);
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let scenes = scenes(1, 13);
    let tasks = prepared(&scenes, &[GLANDS]);
    let mut model = ModelGraph::build(&tiny_arch(), 2).unwrap();
    let before = model.store.clone();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut s = tasks[GLANDS].samples[0].clone();
    s.image.data_mut()[17] = 1.5;
    let batch = TrainBatch::from_samples(vec![(GLANDS.into(), s)], SEGMENTATION, BatchMode::Fixed, 0).unwrap();
    let err = train_step(&mut model, &mut adam, &batch, 1e-3, StepOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    assert_eq!(adam.step_count(), 0);
    for (id, p) in before.iter() {
        assert_eq!(p.tensor.data(), model.store.get(id).tensor.data());
    }
}

#[test]
fn log_follows_the_learning_rate_schedule() {
    let scenes = scenes(4, 14);
    let tasks = prepared(&scenes, &[GLANDS, TISSUE]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(6);
    let model = ModelGraph::build(&tiny_arch(), 0).unwrap();
    let out = train(
        &cfg,
        &tasks,
        model,
        TrainRun {
            out_dir: Some(dir.path()),
            resume: None,
        },
    )
    .unwrap();
    assert_eq!(out.step, 6);
    let lines: Vec<String> = std::fs::read_to_string(dir.path().join(LOG_FILE))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 6);
    for (i, rec) in out.log.iter().enumerate() {
        assert_eq!(rec.step, i as u64 + 1);
        assert_eq!(rec.lr, if i < 3 { 1e-3 } else { 1e-4 });
        assert!(rec.loss.is_finite());
        let parsed: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
        for key in ["step", "super_task", "tasks_present", "per_task_loss", "lr"] {
            assert!(parsed.get(key).is_some(), "log line lacks {key}");
        }
        let expect_tasks: Vec<&str> = if rec.super_task == SEGMENTATION { vec![GLANDS] } else { vec![TISSUE] };
        assert_eq!(rec.tasks_present, expect_tasks);
    }
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
}

fn run_to_dir(cfg: &TrainConfig, tasks: &BTreeMap<String, PreparedTask>, dir: &std::path::Path) {
    let model = ModelGraph::build(&tiny_arch(), 1).unwrap();
    train(
        cfg,
        tasks,
        model,
        TrainRun {
            out_dir: Some(dir),
            resume: None,
        },
    )
    .unwrap();
}

#[test]
fn same_seed_gives_identical_checkpoints_and_resume_matches() {
    let scenes = scenes(4, 15);
    let tasks = prepared(&scenes, &[GLANDS, NUCLEI, TISSUE]);
    let mut cfg = short_config(6);
    cfg.checkpoint_every = 3;
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_to_dir(&cfg, &tasks, a.path());
    run_to_dir(&cfg, &tasks, b.path());
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), FINAL_CHECKPOINT), read(b.path(), FINAL_CHECKPOINT));
    assert_eq!(read(a.path(), LOG_FILE), read(b.path(), LOG_FILE));

    // resume into a fresh directory holding a copy of the first run's log
    std::fs::write(c.path().join(LOG_FILE), read(a.path(), LOG_FILE)).unwrap();
    let ckpt = load_checkpoint(&checkpoint_path(a.path(), 3), None).unwrap();
    assert_eq!(ckpt.step, 3);
    let model = ckpt.model.clone();
    let out = train(
        &cfg,
        &tasks,
        model,
        TrainRun {
            out_dir: Some(c.path()),
            resume: Some(ckpt),
        },
    )
    .unwrap();
    assert_eq!(out.log.first().map(|r| r.step), Some(4));
    assert_eq!(read(a.path(), FINAL_CHECKPOINT), read(c.path(), FINAL_CHECKPOINT));
    assert_eq!(read(a.path(), LOG_FILE), read(c.path(), LOG_FILE));

    let mut other = cfg.clone();
    other.seed = 1;
    let ckpt = load_checkpoint(&checkpoint_path(a.path(), 3), None).unwrap();
    let model = ckpt.model.clone();
    let err = train(&other, &tasks, model, TrainRun { out_dir: None, resume: Some(ckpt) })
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn non_finite_loss_names_the_batch_tasks() {
    let scenes = scenes(4, 16);
    let tasks = prepared(&scenes, &[GLANDS, LUMEN, TISSUE]);
    let cfg = short_config(6);
    let mut model = ModelGraph::build(&tiny_arch(), 0).unwrap();
    let id = model.store.id("decoder.lumen.out.bias").unwrap();
    model.store.get_mut(id).tensor.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let run = TrainRun {
        out_dir: Some(dir.path()),
        resume: None,
    };
    match train(&cfg, &tasks, model, run).err().expect("training should stop") {
        Error::NonFiniteLoss { step, tasks: present } => {
            assert!(present.contains(&LUMEN.to_string()), "{present:?}");
            assert!((1..=6).contains(&step));
            let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
            assert_eq!(log.lines().count() as u64, step - 1);
            assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn super_task_without_probability_is_a_config_error() {
    let scenes = scenes(2, 17);
    let tasks = prepared(&scenes, &[GLANDS]);
    let mut cfg = short_config(2);
    cfg.super_task_probabilities.clear();
    let model = ModelGraph::build(&tiny_arch(), 0).unwrap();
    assert!(matches!(train(&cfg, &tasks, model, TrainRun::default()), Err(Error::Config(_))));
    let mut cfg = short_config(2);
    cfg.lr.drop_step = 2;
    let model = ModelGraph::build(&tiny_arch(), 0).unwrap();
    assert!(matches!(train(&cfg, &tasks, model, TrainRun::default()), Err(Error::Config(_))));
}

#[test]
fn subtype_targets_shift_classes_to_channels() {
    let scenes = scenes(2, 18);
    let data = TaskData::from_scenes(NUCLEI, &scenes, &[0, 0], 32).unwrap();
    let task = prepare_subtype_task(&data, 3).unwrap();
    for (s, sample) in task.samples.iter().zip(&data.samples) {
        let map = sample.instances().unwrap();
        let PreparedTarget::Subtype { classes, fg } = &s.target else {
            panic!("subtype target expected")
        };
        for (p, &id) in map.ids().iter().enumerate() {
            assert_eq!(fg[p], id > 0);
            if id > 0 {
                assert_eq!(classes[p] + 1, map.class_of(id).unwrap());
            }
        }
    }
    assert!(prepare_subtype_task(&data, 1).is_err());
}

/// Model whose lumen decoder predicts foreground everywhere.
fn all_foreground_model() -> ModelGraph {
    let mut m = ModelGraph::build(&tiny_arch(), 0).unwrap();
    let w = m.store.id("decoder.lumen.out.weight").unwrap();
    let b = m.store.id("decoder.lumen.out.bias").unwrap();
    m.store.get_mut(w).tensor.data_mut().fill(0.0);
    m.store.get_mut(b).tensor.data_mut().copy_from_slice(&[0.0, 5.0]);
    m
}

/// `area` foreground pixels laid out in raster order.
fn label_with_area(h: usize, w: usize, area: usize) -> InstanceMap {
    let ids = (0..h * w).map(|p| u32::from(p < area)).collect();
    InstanceMap::new(h, w, ids).unwrap()
}

fn tile(id: usize, seed: u64) -> Tile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tile {
        id,
        image: Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0)),
        truth: label_with_area(16, 16, 0),
    }
}

#[test]
fn ranking_sorts_by_dice_then_id() {
    let m = all_foreground_model();
    let scheme = Recovery::Eroded2 { radius: 1 };
    let tiles = [tile(0, 1), tile(1, 2), tile(2, 3)];
    // every pixel is predicted, so Dice = 2a / (a + 256)
    let areas = [28, 209, 85];
    let labels: Vec<InstanceMap> = areas.iter().map(|&a| label_with_area(16, 16, a)).collect();
    let refs: Vec<&Tile> = tiles.iter().collect();
    let lrefs: Vec<&InstanceMap> = labels.iter().collect();
    let ranked = rank_regions_by_error(&m, LUMEN, &refs, &lrefs, scheme).unwrap();
    assert_eq!(ranked.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 2, 1]);
    for r in &ranked {
        let a = areas[r.id] as f64;
        assert!((r.dice - 2.0 * a / (a + 256.0)).abs() < 1e-12);
    }
    assert!((ranked[0].dice - 0.2).abs() < 0.01 && (ranked[1].dice - 0.5).abs() < 0.01);
    assert!((ranked[2].dice - 0.9).abs() < 0.01);

    let tied = [tile(7, 4), tile(3, 5), tile(5, 6)];
    let refs: Vec<&Tile> = tied.iter().collect();
    let same = label_with_area(16, 16, 100);
    let ranked = rank_regions_by_error(&m, LUMEN, &refs, &[&same, &same, &same], scheme).unwrap();
    assert_eq!(ranked.iter().map(|r| r.id).collect::<Vec<_>>(), vec![3, 5, 7]);
}

fn lumen_tiles(scenes: &[Scene], offset: usize) -> Vec<Tile> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Tile {
            id: offset + i,
            image: s.image.clone(),
            truth: s.lumen.clone(),
        })
        .collect()
}

fn refine_config(k: usize, rounds: usize) -> RefineConfig {
    let mut train = short_config(4);
    train.super_task_probabilities = BTreeMap::from([(SEGMENTATION.to_string(), 1.0)]);
    RefineConfig {
        task: LUMEN.into(),
        super_task: SEGMENTATION.into(),
        scheme: Recovery::Eroded2 { radius: 1 },
        rounds,
        k_per_round: k,
        min_gain: None,
        warm_start: true,
        train,
    }
}

#[test]
fn refine_with_k_equal_to_pool_labels_everything_in_one_round() {
    let pool = lumen_tiles(&scenes(5, 19), 0);
    let val = lumen_tiles(&scenes(2, 20), 100);
    let state = RefineState::new(vec![0], vec![1, 2, 3, 4]).unwrap();
    let cfg = refine_config(4, 5);
    let (state, report) = refine_loop(
        state,
        &pool,
        &val,
        &cfg,
        |_| ModelGraph::build(&tiny_arch(), 3),
        |t| t.truth.clone(),
    )
    .unwrap();
    assert_eq!(report.stop, StopReason::PoolExhausted);
    assert_eq!(report.rounds.len(), 2);
    assert_eq!(report.rounds[0].extracted.len(), 4);
    assert!(report.rounds[1].extracted.is_empty());
    assert!(state.unlabelled.is_empty());
    assert_eq!(state.labelled.len(), 5);
    assert_eq!(state.validation_dice.len(), 2);
}

#[test]
fn refine_moves_the_lowest_ranked_tiles() {
    let pool = lumen_tiles(&scenes(7, 21), 0);
    let val = lumen_tiles(&scenes(2, 22), 100);
    let state = RefineState::new(vec![0, 1], vec![2, 3, 4, 5, 6]).unwrap();
    let cfg = refine_config(2, 3);
    let (state, report) = refine_loop(
        state,
        &pool,
        &val,
        &cfg,
        |_| ModelGraph::build(&tiny_arch(), 3),
        |t| t.truth.clone(),
    )
    .unwrap();
    assert_eq!(report.stop, StopReason::Completed);
    let mut labelled = vec![0, 1];
    for r in &report.rounds {
        assert_eq!(r.trained_on, labelled.len());
        let worst: Vec<usize> = r.ranking.iter().take(2).map(|t| t.id).collect();
        assert_eq!(r.extracted, worst);
        assert!(r.ranking.windows(2).all(|w| w[0].dice <= w[1].dice));
        labelled.extend(&r.extracted);
    }
    assert_eq!(state.labelled, labelled);
    assert!(state.labelled.iter().all(|id| !state.unlabelled.contains(id)));
}

#[test]
fn refine_state_rejects_overlapping_pools() {
    assert!(RefineState::new(vec![1, 2], vec![2, 3]).is_err());
    let pool = lumen_tiles(&scenes(2, 23), 0);
    let state = RefineState::new(vec![0], vec![1]).unwrap();
    let cfg = refine_config(1, 0);
    assert!(refine_loop(state, &pool, &pool, &cfg, |_| ModelGraph::build(&tiny_arch(), 0), |t| t.truth.clone()).is_err());
}
