use cerberus::autodiff::ops;
use cerberus::autodiff::{adam_step, gradcheck, AdamConfig, AdamState, GradcheckConfig, Graph, Mode, ParamStore, Tensor};
use cerberus::instances::InstanceMap;
use cerberus::losses::{
    build_unet_weights, cross_entropy, dice_loss, masked_ce_dice, multi_task_loss, sample_losses, unet_weight,
    weighted_cross_entropy, LossAgg, SampleTarget, TaskLoss, DEFAULT_SIGMA, DEFAULT_W0,
};
use cerberus::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn eval_f32(shape: &[usize], data: &[f64], f: impl FnOnce(&mut Graph<f32>, cerberus::autodiff::NodeId) -> cerberus::Result<cerberus::autodiff::NodeId>) -> f64 {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.input(Tensor::new(shape.to_vec(), data.iter().map(|v| *v as f32).collect()).unwrap());
    let y = f(&mut g, x).unwrap();
    g.value(y).data()[0] as f64
}

/// `-log softmax` of channel `t` at position `i` of sample `s`, straight from the definition.
fn oracle_nll(x: &[f64], k: usize, inner: usize, s: usize, i: usize, t: usize) -> f64 {
    let logits: Vec<f64> = (0..k).map(|c| x[(s * k + c) * inner + i]).collect();
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    lse - logits[t]
}

fn oracle_softmax(x: &[f64], k: usize, inner: usize, s: usize, i: usize, c: usize) -> f64 {
    let z: f64 = (0..k).map(|j| x[(s * k + j) * inner + i].exp()).sum();
    x[(s * k + c) * inner + i].exp() / z
}

#[test]
fn cross_entropy_examples() {
    let uniform = eval_f32(&[1, 2], &[0.3, 0.3], |g, x| cross_entropy(g, x, &[1]));
    assert!((uniform - std::f64::consts::LN_2).abs() < 1e-6);

    let confident = eval_f32(&[2, 3], &[20.0, 0.0, 0.0, 0.0, 0.0, 20.0], |g, x| cross_entropy(g, x, &[0, 2]));
    assert!(confident < 1e-8, "{confident}");

    let (n, k, h, w) = (2, 4, 3, 5);
    let x = random_vec(n * k * h * w, 4.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t: Vec<u32> = (0..n * h * w).map(|_| rng.random_range(0..k as u32)).collect();
    let got = eval_f32(&[n, k, h, w], &x, |g, xn| cross_entropy(g, xn, &t));
    let inner = h * w;
    let want = (0..n)
        .flat_map(|s| (0..inner).map(move |i| (s, i)))
        .map(|(s, i)| oracle_nll(&x, k, inner, s, i, t[s * inner + i] as usize))
        .sum::<f64>()
        / (n * inner) as f64;
    assert!((got - want).abs() <= 1e-5, "{got} vs {want}");

    let mut g = Graph::<f32>::new(Mode::Eval);
    let xn = g.input(Tensor::zeros(&[1, 2]));
    assert!(matches!(cross_entropy(&mut g, xn, &[2]), Err(Error::InvalidArgument(_))));
}

#[test]
fn weighted_cross_entropy_examples() {
    let (n, k, inner) = (1, 3, 6);
    let x = random_vec(n * k * inner, 2.0, 3);
    let t = vec![0, 1, 2, 2, 1, 0];
    let plain = eval_f32(&[n, k, 2, 3], &x, |g, xn| cross_entropy(g, xn, &t));
    let ones = eval_f32(&[n, k, 2, 3], &x, |g, xn| weighted_cross_entropy(g, xn, &t, &[1.0; 6]));
    assert!((plain - ones).abs() < 1e-6);

    // Zero-margin logits everywhere except one confident pixel of weight 2.
    let mut z = vec![0.0; 2 * 4];
    z[0] = 30.0;
    let got = eval_f32(&[1, 2, 4], &z, |g, xn| weighted_cross_entropy(g, xn, &[0, 0, 1, 1], &[2.0, 1.0, 1.0, 1.0]));
    let want = (2.0 * 0.0 + 3.0 * std::f64::consts::LN_2) / 5.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    let mut g = Graph::<f32>::new(Mode::Eval);
    let xn = g.input(Tensor::zeros(&[1, 2, 2]));
    let err = weighted_cross_entropy(&mut g, xn, &[0, 1], &[1.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

/// Distances from every pixel to every instance by scanning all instance pixels.
fn brute_distances(map: &InstanceMap) -> Vec<Vec<f64>> {
    let (h, w) = (map.height(), map.width());
    (1..=map.count())
        .map(|id| {
            let members: Vec<(usize, usize)> =
                (0..h * w).filter(|p| map.ids()[*p] as usize == id).map(|p| (p / w, p % w)).collect();
            (0..h * w)
                .map(|p| {
                    let (r, c) = ((p / w) as f64, (p % w) as f64);
                    members
                        .iter()
                        .map(|(mr, mc)| ((*mr as f64 - r).powi(2) + (*mc as f64 - c).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect()
}

fn brute_weights(map: &InstanceMap, wc: [f64; 2]) -> Vec<f64> {
    let d = brute_distances(map);
    (0..map.ids().len())
        .map(|p| {
            let mut ds: Vec<f64> = d.iter().map(|v| v[p]).collect();
            ds.sort_by(f64::total_cmp);
            let floor = wc[usize::from(map.ids()[p] != 0)];
            match ds.len() {
                0 => floor,
                1 => floor + DEFAULT_W0 * (-(ds[0] + 1e6).powi(2) / (2.0 * DEFAULT_SIGMA.powi(2))).exp(),
                _ => floor + DEFAULT_W0 * (-(ds[0] + ds[1]).powi(2) / (2.0 * DEFAULT_SIGMA.powi(2))).exp(),
            }
        })
        .collect()
}

fn two_blobs() -> InstanceMap {
    // 3x3 blobs in columns 2..5 and 9..12, four empty columns between them
    let (h, w) = (9, 14);
    let mut ids = vec![0u32; h * w];
    for r in 3..6 {
        for c in 2..5 {
            ids[r * w + c] = 1;
        }
        for c in 9..12 {
            ids[r * w + c] = 2;
        }
    }
    InstanceMap::new(h, w, ids).unwrap()
}

#[test]
fn unet_weight_examples() {
    let empty = build_unet_weights(&InstanceMap::empty(5, 7), DEFAULT_W0, DEFAULT_SIGMA, None);
    assert!(empty.weights.iter().all(|v| *v == empty.class_weights[0]));
    assert_eq!(empty.class_weights[0], 1.0);

    assert_eq!(unet_weight(1.5, 0.0, 0.0, DEFAULT_W0, DEFAULT_SIGMA), 1.5 + DEFAULT_W0);

    let map = two_blobs();
    let wm = build_unet_weights(&map, DEFAULT_W0, DEFAULT_SIGMA, None);
    let want = brute_weights(&map, wm.class_weights);
    for (a, b) in wm.weights.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert!(wm.min() >= wm.class_weights[0].min(wm.class_weights[1]));

    // Bars at columns 4 and 12; column 8 is 4 from each.
    let (h, w) = (5, 17);
    let mut ids = vec![0u32; h * w];
    for r in 1..4 {
        ids[r * w + 4] = 1;
        ids[r * w + 12] = 2;
    }
    let map = InstanceMap::new(h, w, ids).unwrap();
    let wm = build_unet_weights(&map, DEFAULT_W0, DEFAULT_SIGMA, Some([0.5, 0.5]));
    let mid = wm.get(2, 8);
    let expect = 1.0 + DEFAULT_W0 * (-64.0 / (2.0 * DEFAULT_SIGMA * DEFAULT_SIGMA)).exp();
    assert!((mid - expect).abs() < 1e-12, "{mid} vs {expect}");

    // Bars 4 px apart at columns 3 and 7; midline column 5 is 2 from each.
    let (h, w) = (5, 11);
    let mut ids = vec![0u32; h * w];
    for r in 1..4 {
        ids[r * w + 3] = 1;
        ids[r * w + 7] = 2;
    }
    let map = InstanceMap::new(h, w, ids).unwrap();
    let wm = build_unet_weights(&map, DEFAULT_W0, DEFAULT_SIGMA, Some([0.5, 0.5]));
    let expect = 1.0 + DEFAULT_W0 * (-16.0 / (2.0 * DEFAULT_SIGMA * DEFAULT_SIGMA)).exp();
    assert!((wm.get(2, 5) - expect).abs() < 1e-12);
    let brute = brute_weights(&map, wm.class_weights);
    assert!((brute[2 * w + 5] - expect).abs() < 1e-12);
}

#[test]
fn unet_weights_peak_where_instances_touch() {
    let (h, w) = (8, 8);
    let mut ids = vec![0u32; h * w];
    for r in 2..6 {
        for c in 1..4 {
            ids[r * w + c] = 1;
        }
        for c in 4..7 {
            ids[r * w + c] = 2;
        }
    }
    let map = InstanceMap::new(h, w, ids.clone()).unwrap();
    let wm = build_unet_weights(&map, DEFAULT_W0, DEFAULT_SIGMA, None);
    let best = wm.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let touching = |p: usize| {
        let (r, c) = (p / w, p % w);
        ids[p] != 0
            && [(0i64, -1i64), (0, 1)].iter().any(|(dr, dc)| {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                rr >= 0 && cc >= 0 && (cc as usize) < w && {
                    let q = rr as usize * w + cc as usize;
                    ids[q] != 0 && ids[q] != ids[p]
                }
            })
    };
    for (p, v) in wm.weights.iter().enumerate() {
        if *v == best {
            assert!(touching(p), "maximum at non-touching pixel {p}");
        }
    }
    assert!(wm.weights.iter().all(|v| *v >= wm.class_weights[0].min(wm.class_weights[1])));
}

#[test]
fn weighted_cross_entropy_with_unet_weights_matches_oracle() {
    let map = two_blobs();
    let wm = build_unet_weights(&map, DEFAULT_W0, DEFAULT_SIGMA, None);
    let inner = map.ids().len();
    let x = random_vec(2 * inner, 3.0, 7);
    let t: Vec<u32> = map.ids().iter().map(|v| u32::from(*v != 0)).collect();
    let got = eval_f32(&[1, 2, map.height(), map.width()], &x, |g, xn| {
        weighted_cross_entropy(g, xn, &t, &wm.weights)
    });
    let oracle_w = brute_weights(&map, wm.class_weights);
    let num: f64 = (0..inner).map(|i| oracle_w[i] * oracle_nll(&x, 2, inner, 0, i, t[i] as usize)).sum();
    let want = num / oracle_w.iter().sum::<f64>();
    assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
}

fn onehot_probs(k: usize, targets: &[u32]) -> Vec<f64> {
    let inner = targets.len();
    let mut p = vec![0.0; k * inner];
    for (i, t) in targets.iter().enumerate() {
        p[*t as usize * inner + i] = 1.0;
    }
    p
}

#[test]
fn dice_closed_forms() {
    let t: Vec<u32> = vec![0, 1, 2, 1, 1, 0, 2, 2];
    let exact = eval_f32(&[1, 3, 8], &onehot_probs(3, &t), |g, x| dice_loss(g, x, &t, 1.0));
    let bound: f64 = [2.0, 3.0, 3.0].iter().map(|n| 1.0 / (2.0 * n + 1.0)).sum();
    assert!(exact <= bound + 1e-7 && exact >= 0.0, "{exact}");
    let tight = eval_f32(&[1, 3, 8], &onehot_probs(3, &t), |g, x| dice_loss(g, x, &t, 1e-9));
    assert!(tight < 1e-6);

    let miss: Vec<f64> = onehot_probs(3, &t).iter().map(|v| 1.0 - v).collect();
    let total = eval_f32(&[1, 3, 8], &miss, |g, x| dice_loss(g, x, &t, 1e-9));
    assert!((total - 3.0).abs() < 1e-6, "{total}");

    // Two of four target pixels predicted, hard probabilities, two channels.
    let t = vec![1, 1, 1, 1, 0, 0, 0, 0];
    let fg_pred = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut p: Vec<f64> = fg_pred.iter().map(|v| 1.0 - v).collect();
    p.extend_from_slice(&fg_pred);
    let mut g = Graph::<f64>::new(Mode::Eval);
    let x = g.input(Tensor::new(vec![1, 2, 8], p).unwrap());
    let y = dice_loss(&mut g, x, &t, 0.0).unwrap();
    // class 1: 1 - 4/6; class 0: 1 - 8/10
    let want = (1.0 - 4.0 / 6.0) + (1.0 - 8.0 / 10.0);
    assert!((g.value(y).data()[0] - want).abs() < 1e-12);
}

/// Eqs. for the masked loss evaluated literally from softmax probabilities.
fn oracle_masked(x: &[f64], k: usize, inner: usize, s: usize, t: &[u32], fg: &[bool], eps: f64) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let nu: Vec<usize> = (0..inner).filter(|i| fg[s * inner + i] && t[s * inner + i] as usize == c).collect();
        if nu.is_empty() {
            continue;
        }
        let probs: Vec<f64> = nu.iter().map(|i| oracle_softmax(x, k, inner, s, *i, c)).collect();
        let ce = -probs.iter().map(|p| p.ln()).sum::<f64>() / nu.len() as f64;
        let y_sum = nu.len() as f64;
        let p_sum: f64 = probs.iter().sum();
        let dice = 1.0 - (2.0 * p_sum + eps) / (y_sum + p_sum + eps);
        total += ce + dice;
    }
    total
}

fn random_masked_case(seed: u64, n: usize, k: usize, inner: usize) -> (Vec<f64>, Vec<u32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * k * inner).map(|_| rng.random_range(-3.0..3.0)).collect();
    let t = (0..n * inner).map(|_| rng.random_range(0..k as u32)).collect();
    let fg = (0..n * inner).map(|_| rng.random_bool(0.4)).collect();
    (x, t, fg)
}

#[test]
fn masked_loss_matches_literal_oracle() {
    let (n, k, inner) = (2, 2, 20);
    let (x, t, fg) = random_masked_case(11, n, k, inner);
    let mut g = Graph::<f32>::new(Mode::Eval);
    let xn = g.input(Tensor::new(vec![n, k, 4, 5], x.iter().map(|v| *v as f32).collect()).unwrap());
    let y = masked_ce_dice(&mut g, xn, &t, &fg, 1.0).unwrap();
    for s in 0..n {
        let want = oracle_masked(&x, k, inner, s, &t, &fg, 1.0);
        let got = g.value(y).data()[s] as f64;
        assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
    }
}

#[test]
fn masked_loss_is_blind_to_background() {
    let (n, k, inner) = (2, 3, 36);
    for case in 0..100u64 {
        let (x, t, fg) = random_masked_case(100 + case, n, k, inner);
        let mut perturbed = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        for s in 0..n {
            for i in 0..inner {
                if !fg[s * inner + i] {
                    for c in 0..k {
                        perturbed[(s * k + c) * inner + i] += rng.random_range(-50.0..50.0);
                    }
                }
            }
        }
        let run = |data: &[f64]| {
            let mut g = Graph::<f32>::new(Mode::Eval);
            let xn = g.input_with_grad(Tensor::new(vec![n, k, 6, 6], data.iter().map(|v| *v as f32).collect()).unwrap());
            let y = masked_ce_dice(&mut g, xn, &t, &fg, 1.0).unwrap();
            let total = ops::sum(&mut g, y);
            let grads = g.backward(total, &mut ParamStore::new()).unwrap();
            (g.value(y).data().to_vec(), grads.wrt(xn).unwrap().to_vec())
        };
        let (a, ga) = run(&x);
        let (b, gb) = run(&perturbed);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ga, gb);
    }
}

#[test]
fn masked_loss_edge_cases() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let xn = g.input_with_grad(Tensor::new(vec![1, 2, 2, 2], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0, -1.0, 2.0]).unwrap());
    let y = masked_ce_dice(&mut g, xn, &[0, 1, 1, 0], &[false; 4], 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
    let total = ops::sum(&mut g, y);
    let grads = g.backward(total, &mut ParamStore::new()).unwrap();
    assert!(grads.wrt(xn).unwrap().iter().all(|v| *v == 0.0));

    // One foreground pixel, correct by margin 20.
    let mut g = Graph::<f64>::new(Mode::Eval);
    let xn = g.input(Tensor::new(vec![1, 2, 1, 2], vec![0.0, 0.0, 0.0, 20.0]).unwrap());
    let eps = 1.0;
    let y = masked_ce_dice(&mut g, xn, &[0, 1], &[false, true], eps).unwrap();
    let dice_bound = eps / (2.0 + eps);
    assert!(g.value(y).data()[0] < 1e-6 + dice_bound);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = GradcheckConfig {
        step: 1e-5,
        tolerance: 1e-5,
        coords_per_param: 200,
        ..GradcheckConfig::default()
    };
    let (n, k, inner) = (2, 3, 12);
    let (x, t, fg) = random_masked_case(5, n, k, inner);
    let weights: Vec<f64> = random_vec(n * inner, 1.0, 6).iter().map(|v| 1.5 + v).collect();
    let mut store = ParamStore::<f64>::new();
    let p = store.add("logits", Tensor::new(vec![n, k, 3, 4], x).unwrap()).unwrap();
    let report = gradcheck(&mut store, &cfg, |g, s| {
        let xn = g.param(s, p);
        let a = weighted_cross_entropy(g, xn, &t, &weights)?;
        let b = masked_ce_dice(g, xn, &t, &fg, 1.0)?;
        let b = ops::weighted_sum(g, b, vec![0.7, 1.3])?;
        let probs = ops::channel_softmax(g, xn)?;
        let c = dice_loss(g, probs, &t, 1.0)?;
        let ab = ops::add(g, a, b)?;
        ops::add(g, ab, c)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{}", report.max_rel_error);
}

fn pixel_target(rng: &mut ChaCha8Rng, inner: usize, k: u32) -> SampleTarget {
    SampleTarget::Pixels {
        classes: (0..inner).map(|_| rng.random_range(0..k)).collect(),
        weights: Some((0..inner).map(|_| rng.random_range(0.5..3.0)).collect()),
    }
}

#[test]
fn multi_task_loss_structure() {
    // Three decoders over a batch whose rows belong to tasks a, a, b.
    let inner = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let logits: Vec<_> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            store
                .add(*name, Tensor::new(vec![3, 2, 2, 3], random_vec(3 * 2 * inner, 2.0, 20 + i as u64)).unwrap())
                .unwrap()
        })
        .collect();
    let targets: Vec<SampleTarget> = (0..3).map(|_| pixel_target(&mut rng, inner, 2)).collect();
    let batch = ["a", "a", "b"];

    let mut g = Graph::<f64>::new(Mode::Eval);
    let mut outputs = Vec::new();
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        let xn = g.param(&store, logits[i]);
        let per = sample_losses(&mut g, xn, &targets, 1.0).unwrap();
        outputs.push(TaskLoss {
            task: name.to_string(),
            losses: per,
            rows: vec![0, 1, 2],
        });
    }
    let lv = multi_task_loss(&mut g, &outputs, &batch, LossAgg::Sum).unwrap();
    let per = |i: usize| g.value(outputs[i].losses).data().to_vec();
    let want = per(0)[0] + per(0)[1] + per(1)[2];
    let total = g.value(lv.total).data()[0];
    assert!((total - want).abs() < 1e-12);
    assert_eq!(lv.per_task["c"], 0.0);
    assert_eq!(lv.counts["a"], 2);
    assert_eq!(lv.counts["c"], 0);
    let sum: f64 = lv.per_task.values().sum();
    assert!((sum - total).abs() < 1e-12);

    g.backward(lv.total, &mut store).unwrap();
    assert!(store.get(logits[2]).tensor.grad().unwrap().iter().all(|v| *v == 0.0));
    let b_grad = store.get(logits[1]).tensor.grad().unwrap();
    // rows 0 and 1 of task b are masked out
    assert!(b_grad[..2 * 2 * inner].iter().all(|v| *v == 0.0));
    assert!(b_grad[2 * 2 * inner..].iter().any(|v| *v != 0.0));

    let err = multi_task_loss(&mut g, &outputs[..1], &batch, LossAgg::Sum).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn fixed_batch_has_one_nonzero_task() {
    let inner = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f32>::new(Mode::Eval);
    let mut outputs = Vec::new();
    for (i, name) in ["glands", "nuclei", "lumen"].iter().enumerate() {
        let x = random_vec(2 * 2 * inner, 2.0, 40 + i as u64);
        let xn = g.input(Tensor::new(vec![2, 2, 2, 2], x.iter().map(|v| *v as f32).collect()).unwrap());
        let targets: Vec<_> = (0..2).map(|_| pixel_target(&mut rng, inner, 2)).collect();
        let per = sample_losses(&mut g, xn, &targets, 1.0).unwrap();
        outputs.push(TaskLoss {
            task: name.to_string(),
            losses: per,
            rows: vec![0, 1],
        });
    }
    let lv = multi_task_loss(&mut g, &outputs, &["nuclei", "nuclei"], LossAgg::TaskMean).unwrap();
    let nonzero: Vec<_> = lv.per_task.iter().filter(|(_, v)| **v != 0.0).map(|(k, _)| k.as_str()).collect();
    assert_eq!(nonzero, ["nuclei"]);
    let rows = g.value(outputs[1].losses).data();
    let want = (rows[0] + rows[1]) as f64 / 2.0;
    assert!((lv.per_task["nuclei"] - want).abs() < 1e-6);
}

/// Mixed batch: zero-mask construction over every row equals per-task sub-batches.
#[test]
fn zero_mask_equals_sub_batch_decomposition() {
    let (n, inner) = (7, 9);
    let batch = ["seg", "cls", "sub", "seg", "cls", "seg", "sub"];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let seg_targets: Vec<SampleTarget> = (0..n).map(|_| pixel_target(&mut rng, inner, 3)).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let sub_targets: Vec<SampleTarget> = (0..n)
        .map(|_| SampleTarget::Subtype {
            classes: (0..inner).map(|_| rng.random_range(0..2)).collect(),
            fg: (0..inner).map(|_| rng.random_bool(0.5)).collect(),
        })
        .collect();
    let seg_x = random_vec(n * 3 * inner, 2.0, 1);
    let cls_x = random_vec(n * 4, 2.0, 2);
    let sub_x = random_vec(n * 2 * inner, 2.0, 3);

    for agg in [LossAgg::Sum, LossAgg::TaskMean] {
        // dense: every decoder on every row, other tasks' rows masked
        let mut g = Graph::<f32>::new(Mode::Eval);
        let own = |task: &str, t: &SampleTarget, i: usize| if batch[i] == task { t.clone() } else { SampleTarget::Masked };
        let seg_n = g.input(Tensor::new(vec![n, 3, 3, 3], seg_x.iter().map(|v| *v as f32).collect()).unwrap());
        let cls_n = g.input(Tensor::new(vec![n, 4], cls_x.iter().map(|v| *v as f32).collect()).unwrap());
        let sub_n = g.input(Tensor::new(vec![n, 2, 3, 3], sub_x.iter().map(|v| *v as f32).collect()).unwrap());
        let seg_t: Vec<_> = seg_targets.iter().enumerate().map(|(i, t)| own("seg", t, i)).collect();
        let cls_t: Vec<_> =
            labels.iter().enumerate().map(|(i, l)| own("cls", &SampleTarget::Label(*l), i)).collect();
        let sub_t: Vec<_> = sub_targets.iter().enumerate().map(|(i, t)| own("sub", t, i)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let outputs = vec![
            TaskLoss { task: "seg".into(), losses: sample_losses(&mut g, seg_n, &seg_t, 1.0).unwrap(), rows: rows.clone() },
            TaskLoss { task: "cls".into(), losses: sample_losses(&mut g, cls_n, &cls_t, 1.0).unwrap(), rows: rows.clone() },
            TaskLoss { task: "sub".into(), losses: sample_losses(&mut g, sub_n, &sub_t, 1.0).unwrap(), rows },
        ];
        let dense = multi_task_loss(&mut g, &outputs, &batch, agg).unwrap();
        let dense_total = g.value(dense.total).data()[0] as f64;

        // oracle: each task loss on its own sub-batch, computed from definitions in f64
        let mut want = 0.0;
        for task in ["seg", "cls", "sub"] {
            let members: Vec<usize> = (0..n).filter(|i| batch[*i] == task).collect();
            let mut part = 0.0;
            for &i in &members {
                part += match task {
                    "seg" => {
                        let SampleTarget::Pixels { classes, weights } = &seg_targets[i] else { unreachable!() };
                        let w = weights.as_ref().unwrap();
                        let num: f64 = (0..inner).map(|p| w[p] * oracle_nll(&seg_x, 3, inner, i, p, classes[p] as usize)).sum();
                        num / w.iter().sum::<f64>()
                    }
                    "cls" => oracle_nll(&cls_x, 4, 1, i, 0, labels[i] as usize),
                    _ => {
                        let SampleTarget::Subtype { classes, fg } = &sub_targets[i] else { unreachable!() };
                        let mut t = vec![0; n * inner];
                        let mut m = vec![false; n * inner];
                        t[i * inner..(i + 1) * inner].copy_from_slice(classes);
                        m[i * inner..(i + 1) * inner].copy_from_slice(fg);
                        oracle_masked(&sub_x, 2, inner, i, &t, &m, 1.0)
                    }
                };
            }
            if agg == LossAgg::TaskMean {
                part /= members.len() as f64;
            }
            want += part;
        }
        assert!((dense_total - want).abs() <= 1e-6 * want.max(1.0), "{agg:?}: {dense_total} vs {want}");

        // gathered: each decoder only on its own rows, same aggregate
        let mut g = Graph::<f32>::new(Mode::Eval);
        let mut outputs = Vec::new();
        for (task, x, k, tail) in [("seg", &seg_x, 3, vec![3, 3]), ("cls", &cls_x, 4, vec![]), ("sub", &sub_x, 2, vec![3, 3])] {
            let members: Vec<usize> = (0..n).filter(|i| batch[*i] == task).collect();
            let per = x.len() / n;
            let data: Vec<f32> = members.iter().flat_map(|i| x[i * per..(i + 1) * per].iter().map(|v| *v as f32)).collect();
            let mut shape = vec![members.len(), k];
            shape.extend(&tail);
            let xn = g.input(Tensor::new(shape, data).unwrap());
            let targets: Vec<_> = members
                .iter()
                .map(|i| match task {
                    "seg" => seg_targets[*i].clone(),
                    "cls" => SampleTarget::Label(labels[*i]),
                    _ => sub_targets[*i].clone(),
                })
                .collect();
            outputs.push(TaskLoss { task: task.into(), losses: sample_losses(&mut g, xn, &targets, 1.0).unwrap(), rows: members });
        }
        let gathered = multi_task_loss(&mut g, &outputs, &batch, agg).unwrap();
        let gathered_total = g.value(gathered.total).data()[0] as f64;
        assert!((gathered_total - dense_total).abs() <= 1e-6 * want.max(1.0));
    }
}

/// Plain gradient descent on free logits: the mean loss over each 50-step
/// window is below that of the previous window.
fn assert_descends(build: impl Fn(&mut Graph<f32>, cerberus::autodiff::NodeId) -> cerberus::autodiff::NodeId, shape: &[usize], seed: u64) {
    let mut store = ParamStore::<f32>::new();
    let n: usize = shape.iter().product();
    let init = random_vec(n, 1.0, seed).iter().map(|v| *v as f32).collect();
    let p = store.add("logits", Tensor::new(shape.to_vec(), init).unwrap()).unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut windows = Vec::new();
    let mut acc = 0.0;
    for step in 0..200 {
        store.zero_grad();
        let mut g = Graph::<f32>::new(Mode::Train);
        let x = g.param(&store, p);
        let loss = build(&mut g, x);
        acc += g.value(loss).data()[0] as f64;
        g.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &mut adam, 0.02).unwrap();
        if step % 50 == 49 {
            windows.push(acc / 50.0);
            acc = 0.0;
        }
    }
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn losses_descend_on_micro_problem() {
    let inner = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let t: Vec<u32> = (0..2 * inner).map(|_| rng.random_range(0..3)).collect();
    let w: Vec<f64> = (0..2 * inner).map(|_| rng.random_range(1.0..4.0)).collect();
    let fg: Vec<bool> = (0..2 * inner).map(|_| rng.random_bool(0.6)).collect();
    let shape = [2, 3, 4, 4];
    assert_descends(|g, x| cross_entropy(g, x, &t).unwrap(), &shape, 1);
    assert_descends(|g, x| weighted_cross_entropy(g, x, &t, &w).unwrap(), &shape, 2);
    assert_descends(
        |g, x| {
            let p = ops::channel_softmax(g, x).unwrap();
            dice_loss(g, p, &t, 1.0).unwrap()
        },
        &shape,
        3,
    );
    assert_descends(
        |g, x| {
            let per = masked_ce_dice(g, x, &t, &fg, 1.0).unwrap();
            ops::sum(g, per)
        },
        &shape,
        4,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_stay_in_range(seed in 0u64..10_000, k in 2usize..5) {
        let inner = 10;
        let x = random_vec(2 * k * inner, 6.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let t: Vec<u32> = (0..2 * inner).map(|_| rng.random_range(0..k as u32)).collect();
        let mut g = Graph::<f64>::new(Mode::Eval);
        let xn = g.input(Tensor::new(vec![2, k, inner], x).unwrap());
        let ce = cross_entropy(&mut g, xn, &t).unwrap();
        prop_assert!(g.value(ce).data()[0] >= 0.0);
        let p = ops::channel_softmax(&mut g, xn).unwrap();
        let d = dice_loss(&mut g, p, &t, 1.0).unwrap();
        let v = g.value(d).data()[0];
        prop_assert!((0.0..=k as f64).contains(&v));
    }
}
