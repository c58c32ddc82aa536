use std::collections::BTreeMap;

use cerberus::sampler::{
    sample_fixed_batch, sample_mixed_batch, sampler_stats, select_super_task, BatchMode, Sampler, SuperTask,
    TaskDatasetRef,
};
use cerberus::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(task: &str, super_task: &str, len: usize, weight: f64) -> TaskDatasetRef {
    TaskDatasetRef {
        task: task.into(),
        super_task: super_task.into(),
        samples: (0..len).collect(),
        patients: (0..len as u32).collect(),
        weight,
    }
}

fn super_task(id: &str, tasks: &[&str], probability: f64) -> SuperTask {
    SuperTask {
        id: id.into(),
        input: [64, 64],
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
        probability,
    }
}

fn uniform(n_tasks: usize, mode: BatchMode, batch: usize) -> Sampler {
    let names: Vec<String> = (0..n_tasks).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Sampler {
        super_tasks: vec![super_task("seg", &refs, 1.0)],
        datasets: names.iter().map(|t| dataset(t, "seg", 20, 1.0)).collect(),
        mode,
        batch_size: batch,
    }
}

#[test]
fn super_task_selection_follows_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = [super_task("a", &["x"], 1.0)];
    for _ in 0..100 {
        assert_eq!(select_super_task(&mut rng, &one).unwrap().id, "a");
    }
    let pair = [super_task("seg", &["x"], 0.7), super_task("cls", &["y"], 0.3)];
    let draws = 100_000;
    let seg = (0..draws)
        .filter(|_| select_super_task(&mut rng, &pair).unwrap().id == "seg")
        .count();
    assert!((seg as f64 / draws as f64 - 0.7).abs() < 0.01);
    let never = [super_task("a", &["x"], 1.0), super_task("b", &["y"], 0.0)];
    for _ in 0..10_000 {
        assert_eq!(select_super_task(&mut rng, &never).unwrap().id, "a");
    }
    assert!(matches!(select_super_task(&mut rng, &[]), Err(Error::InvalidArgument(_))));
    let bad = [super_task("a", &["x"], 0.5), super_task("b", &["y"], 0.4)];
    assert!(select_super_task(&mut rng, &bad).is_err());
}

#[test]
fn fixed_batches_hold_one_task_drawn_uniformly() {
    let s = uniform(4, BatchMode::Fixed, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = BTreeMap::<String, usize>::new();
    let draws = 40_000;
    for _ in 0..draws {
        let plan = s.next_batch(&mut rng).unwrap();
        assert_eq!(plan.distinct_tasks().len(), 1);
        assert_eq!(plan.slots.len(), 5);
        *counts.entry(plan.slots[0].0.clone()).or_default() += 1;
    }
    for c in counts.values() {
        assert!((*c as f64 / draws as f64 - 0.25).abs() < 0.01);
    }
}

#[test]
fn single_sample_dataset_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut d = dataset("solo", "seg", 1, 1.0);
    d.samples = vec![17];
    let st = super_task("seg", &["solo"], 1.0);
    let plan = sample_fixed_batch(&mut rng, &[d.clone()], &st, 3).unwrap();
    assert_eq!(plan.slots, vec![("solo".to_string(), 17); 3]);
    let plan = sample_mixed_batch(&mut rng, &[d], &st, 3).unwrap();
    assert_eq!(plan.slots, vec![("solo".to_string(), 17); 3]);
}

#[test]
fn empty_datasets_are_skipped_then_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let st = super_task("seg", &["a", "b"], 1.0);
    let sets = [dataset("a", "seg", 0, 1.0), dataset("b", "seg", 4, 1.0)];
    for _ in 0..200 {
        let plan = sample_mixed_batch(&mut rng, &sets, &st, 4).unwrap();
        assert!(plan.slots.iter().all(|(t, _)| t == "b"));
    }
    let empty = [dataset("a", "seg", 0, 1.0), dataset("b", "seg", 0, 1.0)];
    assert!(matches!(sample_fixed_batch(&mut rng, &empty, &st, 2), Err(Error::InvalidArgument(_))));
    assert!(sample_mixed_batch(&mut rng, &sets, &st, 0).is_err());
}

#[test]
fn mixed_slot_frequencies_converge() {
    let s = uniform(3, BatchMode::Mixed, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats = sampler_stats(&mut rng, &s, 100).unwrap();
    assert_eq!(stats.slots, 100_000);
    for t in ["t0", "t1", "t2"] {
        assert!((stats.slot_frequency(t) - 1.0 / 3.0).abs() < 0.01, "{t}");
    }
    // 2 degrees of freedom: 13.8 is the 0.999 quantile
    assert!(stats.task_chi_square.statistic < 13.8);
    assert_eq!(stats.task_chi_square.dof, 2);
}

#[test]
fn degenerate_weights_use_one_task() {
    let mut s = uniform(3, BatchMode::Mixed, 8);
    s.datasets[1].weight = 0.0;
    s.datasets[2].weight = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        assert!(s.next_batch(&mut rng).unwrap().slots.iter().all(|(t, _)| t == "t0"));
    }
}

#[test]
fn mixed_batch_of_one_matches_fixed_in_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 60_000;
    let mut fixed = uniform(3, BatchMode::Fixed, 1);
    fixed.datasets[0].weight = 2.0;
    let mut mixed = fixed.clone();
    mixed.mode = BatchMode::Mixed;
    let a = sampler_stats(&mut rng, &fixed, draws).unwrap();
    let b = sampler_stats(&mut rng, &mixed, draws).unwrap();
    for t in ["t0", "t1", "t2"] {
        assert!((a.slot_frequency(t) - b.slot_frequency(t)).abs() < 0.01);
    }
    assert!((a.slot_frequency("t0") - 0.5).abs() < 0.01);
}

#[test]
fn stats_report_expected_counts_and_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let single = uniform(1, BatchMode::Mixed, 6);
    let stats = sampler_stats(&mut rng, &single, 500).unwrap();
    assert_eq!(stats.distinct_task_histogram, BTreeMap::from([(1, 500)]));
    assert_eq!(stats.task_chi_square.statistic, 0.0);

    let mixed = uniform(4, BatchMode::Mixed, 9);
    let stats = sampler_stats(&mut rng, &mixed, 10_000).unwrap();
    for t in ["t0", "t1", "t2", "t3"] {
        assert!((stats.mean_count_per_batch[t] - 2.25).abs() < 0.05, "{t}");
        assert!((stats.task_slot_expected[t] - 22_500.0).abs() < 1e-6);
    }
    // chance that 9 uniform draws over 4 tasks all agree: 4·(1/4)^9
    assert!(stats.distinct_task_histogram.get(&1).copied().unwrap_or(0) <= 2);

    let fixed = uniform(4, BatchMode::Fixed, 9);
    let stats = sampler_stats(&mut rng, &fixed, 2000).unwrap();
    assert_eq!(stats.distinct_task_histogram, BTreeMap::from([(1, 2000)]));
    assert!(sampler_stats(&mut rng, &fixed, 0).is_err());
}

#[test]
fn super_task_marginals_combine_with_task_weights() {
    let s = Sampler {
        super_tasks: vec![
            super_task("seg", &["glands", "lumen", "nuclei"], 0.7),
            super_task("cls", &["tissue"], 0.3),
        ],
        datasets: vec![
            dataset("glands", "seg", 10, 1.0),
            dataset("lumen", "seg", 10, 1.0),
            dataset("nuclei", "seg", 10, 1.0),
            dataset("tissue", "cls", 10, 1.0),
        ],
        mode: BatchMode::Mixed,
        batch_size: 4,
    };
    assert!((s.slot_probability("glands") - 0.7 / 3.0).abs() < 1e-12);
    assert!((s.slot_probability("tissue") - 0.3).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stats = sampler_stats(&mut rng, &s, 25_000).unwrap();
    assert!((stats.super_task_frequency("seg") - 0.7).abs() < 0.01);
    for (t, p) in [("glands", 0.7 / 3.0), ("tissue", 0.3)] {
        assert!((stats.slot_frequency(t) - p).abs() < 0.01);
    }
    // super tasks never mix
    for _ in 0..1000 {
        let plan = s.next_batch(&mut rng).unwrap();
        let cls = plan.slots.iter().filter(|(t, _)| t == "tissue").count();
        assert!(cls == 0 || cls == plan.slots.len());
    }
}

#[test]
fn same_seed_same_batches() {
    let s = uniform(3, BatchMode::Mixed, 7);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| s.next_batch(&mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

proptest! {
    #[test]
    fn plans_stay_inside_their_super_task(seed in 0u64..1000, n in 1usize..12, fixed in any::<bool>()) {
        let mut s = uniform(3, if fixed { BatchMode::Fixed } else { BatchMode::Mixed }, n);
        s.super_tasks[0].probability = 0.6;
        s.super_tasks.push(super_task("cls", &["c"], 0.4));
        s.datasets.push(dataset("c", "cls", 5, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = s.next_batch(&mut rng).unwrap();
        let st = s.super_tasks.iter().find(|x| x.id == plan.super_task).unwrap();
        prop_assert_eq!(plan.slots.len(), n);
        for (t, i) in &plan.slots {
            prop_assert!(st.tasks.contains(t));
            let d = s.datasets.iter().find(|d| &d.task == t).unwrap();
            prop_assert!(d.samples.contains(i));
        }
        if fixed {
            prop_assert_eq!(plan.distinct_tasks().len(), 1);
        }
    }
}
