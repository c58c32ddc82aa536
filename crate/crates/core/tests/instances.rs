use cerberus::autodiff::Tensor;
use cerberus::instances::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn from_rows(rows: &[&str]) -> InstanceMap {
    let h = rows.len();
    let w = rows[0].len();
    let ids: Vec<u32> = rows
        .iter()
        .flat_map(|r| r.chars().map(|ch| ch.to_digit(10).unwrap()))
        .collect();
    InstanceMap::new(h, w, ids).unwrap()
}

fn one_hot(t: &PixelTarget) -> Tensor<f32> {
    let k = t.scheme.num_classes();
    let n = t.height * t.width;
    Tensor::from_fn(&[k, t.height, t.width], |i| if t.classes[i % n] as usize == i / n { 1.0 } else { 0.0 })
}

fn iou(a: &InstanceMap, ida: u32, b: &InstanceMap, idb: u32) -> f64 {
    let (mut inter, mut uni) = (0, 0);
    for (&x, &y) in a.ids().iter().zip(b.ids()) {
        let (p, q) = (x == ida, y == idb);
        inter += (p && q) as usize;
        uni += (p || q) as usize;
    }
    inter as f64 / uni as f64
}

#[test]
fn erosion_radius_zero_is_union() {
    let gt = from_rows(&["0110", "0120", "3000"]);
    let t = erode_instances(&gt, 0);
    let fg: Vec<u8> = gt.ids().iter().map(|&id| (id > 0) as u8).collect();
    assert_eq!(t.classes, fg);
}

#[test]
fn one_pixel_instance_survives_any_radius() {
    let gt = from_rows(&["00000", "00100", "00000"]);
    for r in 0..5 {
        assert_eq!(erode_instances(&gt, r).classes[7], 1);
    }
}

#[test]
fn boundary_examples() {
    let mut rows = vec!["000000000".to_string(); 9];
    for r in 2..7 {
        rows[r] = "001111100".into();
    }
    let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
    let t = boundary_target(&from_rows(&refs), 1).unwrap();
    assert_eq!(t.count(2), 16);
    assert_eq!(t.count(1), 9);

    let touching = from_rows(&["000000", "011220", "011220", "011220", "000000"]);
    let t = boundary_target(&touching, 1).unwrap();
    for r in 1..4 {
        assert_eq!(t.classes[r * 6 + 2], 2);
        assert_eq!(t.classes[r * 6 + 3], 2);
    }
    assert!(boundary_target(&touching, 0).is_err());
}

#[test]
fn connected_component_examples() {
    let bin = |rows: &[&str]| -> Vec<bool> { rows.iter().flat_map(|r| r.chars().map(|c| c == '1')).collect() };
    assert_eq!(connected_components(3, 3, &bin(&["110", "110", "000"])).unwrap().count(), 1);
    assert_eq!(connected_components(3, 4, &bin(&["1100", "1100", "0011"])).unwrap().count(), 1);
    let m = connected_components(3, 5, &bin(&["11011", "11011", "00000"])).unwrap();
    assert_eq!(m.count(), 2);
    assert_eq!(m.ids()[..5], [1, 1, 0, 2, 2]);
}

#[test]
fn recovery_of_two_eroded_squares() {
    let gt = from_rows(&[
        "0000000000000000",
        "0111110002222200",
        "0111110002222200",
        "0111110002222200",
        "0111110002222200",
        "0111110002222200",
        "0000000000000000",
    ]);
    let target = erode_instances(&gt, 1);
    let rec = recover_instances(&one_hot(&target), Recovery::Eroded2 { radius: 1 }).unwrap();
    assert_eq!(rec.count(), 2);
    assert_eq!(rec.areas(), vec![21, 21]);
    assert!(iou(&rec, 1, &gt, 1) > 0.8 && iou(&rec, 2, &gt, 2) > 0.8);
}

#[test]
fn all_background_recovers_nothing() {
    let probs = Tensor::from_fn(&[3, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 });
    assert_eq!(recover_instances(&probs, Recovery::Boundary3).unwrap().count(), 0);
    let probs = Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 });
    assert_eq!(recover_instances(&probs, Recovery::Eroded2 { radius: 2 }).unwrap().count(), 0);
    assert!(recover_instances(&probs, Recovery::Boundary3).is_err());
}

/// All-pairs geodesic distances over the 8-connected foreground graph.
fn geodesic_oracle(h: usize, w: usize, classes: &[u8]) -> Vec<u32> {
    let seeds = connected_components(h, w, &classes.iter().map(|&c| c == 1).collect::<Vec<_>>()).unwrap();
    let n = h * w;
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for p in 0..n {
        d[p][p] = 0;
        for q in 0..n {
            let (dr, dc) = ((p / w).abs_diff(q / w), (p % w).abs_diff(q % w));
            if p != q && dr <= 1 && dc <= 1 && classes[p] > 0 && classes[q] > 0 {
                d[p][q] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    (0..n)
        .map(|p| match classes[p] {
            0 => 0,
            1 => seeds.ids()[p],
            _ => (0..n)
                .filter(|&s| seeds.ids()[s] > 0)
                .map(|s| (d[s][p], seeds.ids()[s]))
                .filter(|&(dist, _)| dist < inf)
                .min()
                .map_or(0, |(_, id)| id),
        })
        .collect()
}

#[test]
fn boundary3_ridge_separates_touching_squares() {
    let rows = [
        "0000000000000",
        "0222222222220",
        "0211112111120",
        "0211112111120",
        "0211112111120",
        "0222222222220",
        "0000000000000",
    ];
    let classes: Vec<u8> = rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect();
    let (h, w) = (7, 13);
    let rec = recover_from_classes(h, w, &classes, Recovery::Boundary3).unwrap();
    assert_eq!(rec.count(), 2);
    assert_eq!(rec.ids(), geodesic_oracle(h, w, &classes).as_slice());
}

#[test]
fn boundary3_matches_geodesic_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let (h, w) = (7, 8);
        let classes: Vec<u8> = (0..h * w)
            .map(|_| match rng.random_range(0..10) {
                0..=2 => 0,
                3..=4 => 1,
                _ => 2,
            })
            .collect();
        let rec = recover_from_classes(h, w, &classes, Recovery::Boundary3).unwrap();
        let raw = geodesic_oracle(h, w, &classes);
        let want = InstanceMap::compacting(h, w, &raw).unwrap();
        assert_eq!(rec, want);
    }
}

#[test]
fn majority_vote_examples() {
    let inst = InstanceMap::new(1, 5, vec![1, 1, 1, 1, 1]).unwrap();
    assert_eq!(majority_vote_subtype(&inst, &[2, 2, 2, 2, 2]).unwrap(), vec![2]);
    assert_eq!(majority_vote_subtype(&inst, &[1, 1, 1, 2, 2]).unwrap(), vec![1]);
    let four = InstanceMap::new(1, 4, vec![1, 1, 1, 1]).unwrap();
    assert_eq!(majority_vote_subtype(&four, &[3, 3, 1, 1]).unwrap(), vec![1]);
    assert_eq!(majority_vote_subtype(&inst, &[0, 0, 0, 0, 3]).unwrap(), vec![3]);
    assert_eq!(majority_vote_subtype(&four, &[0, 0, 0, 0]).unwrap(), vec![0]);
}

#[test]
fn majority_vote_follows_instances_not_ids() {
    let inst = from_rows(&["1122", "1133", "0033"]);
    let px = [1, 2, 3, 3, 2, 2, 1, 1, 0, 0, 1, 2];
    let labels = majority_vote_subtype(&inst, &px).unwrap();
    let perm = [3, 1, 2];
    let moved = inst.relabel(&perm).unwrap();
    let relabelled = majority_vote_subtype(&moved, &px).unwrap();
    for (old, &new) in perm.iter().enumerate() {
        assert_eq!(labels[old], relabelled[new as usize - 1]);
    }
}

#[test]
fn patch_examples() {
    let (h, w) = (12, 12);
    let image = Tensor::from_fn(&[2, h, w], |i| i as f32 + 1.0);
    let mut ids = vec![0; h * w];
    for r in 1..=3 {
        for c in 1..=3 {
            ids[r * w + c] = 1;
        }
    }
    ids[6 * w + 6] = 2;
    let inst = InstanceMap::new(h, w, ids).unwrap();
    assert_eq!(centroids(&inst), vec![(2, 2), (6, 6)]);

    let patches = extract_centered_patches(&image, &inst, 5).unwrap();
    assert_eq!(patches.len(), 2);
    let (id, p) = &patches[1];
    assert_eq!(*id, 2);
    for c in 0..2 {
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(p.data()[(c * 5 + y) * 5 + x], image.data()[(c * h + 4 + y) * w + 4 + x]);
            }
        }
    }
    // corner instance: rows/cols −2.. are off-canvas
    let corner = InstanceMap::new(h, w, (0..h * w).map(|i| (i == 0) as u32).collect()).unwrap();
    let (_, p) = &extract_centered_patches(&image, &corner, 6).unwrap()[0];
    for y in 0..6 {
        for x in 0..6 {
            let v = p.data()[y * 6 + x];
            if y < 3 || x < 3 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, image.data()[(y - 3) * w + (x - 3)]);
            }
        }
    }
}

fn random_discs(seed: u64, radius: usize) -> InstanceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (40usize, 40usize);
    let mut ids = vec![0u32; h * w];
    let mut placed: Vec<(i64, i64, i64)> = Vec::new();
    for _ in 0..60 {
        let rad = rng.random_range(2 * radius as i64 / 2 + 2..=6);
        let cy = rng.random_range(rad..h as i64 - rad);
        let cx = rng.random_range(rad..w as i64 - rad);
        // gap ≥ 2 px between discs
        if placed.iter().any(|&(y, x, r)| {
            let d2 = (y - cy).pow(2) + (x - cx).pow(2);
            d2 < (r + rad + 3).pow(2)
        }) {
            continue;
        }
        placed.push((cy, cx, rad));
        let id = placed.len() as u32;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if (y - cy).pow(2) + (x - cx).pow(2) <= rad * rad {
                    ids[(y as usize) * w + x as usize] = id;
                }
            }
        }
    }
    InstanceMap::new(h, w, ids).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn eroded_round_trip_preserves_instances(seed in 0u64..10_000) {
        let radius = 2;
        let gt = random_discs(seed, radius);
        let rec = recover_instances(&one_hot(&erode_instances(&gt, radius)), Recovery::Eroded2 { radius }).unwrap();
        prop_assert_eq!(rec.count(), gt.count());
        for k in 1..=gt.count() as u32 {
            let best = (1..=rec.count() as u32).map(|j| iou(&gt, k, &rec, j)).fold(0.0, f64::max);
            prop_assert!(best >= 0.8, "instance {} IoU {}", k, best);
        }
    }

    #[test]
    fn boundary_classes_partition_foreground(seed in 0u64..10_000, thickness in 1usize..3) {
        let gt = random_discs(seed, 2);
        let t = boundary_target(&gt, thickness).unwrap();
        let collapsed: Vec<u8> = t.classes.iter().map(|&c| (c > 0) as u8).collect();
        prop_assert_eq!(collapsed, erode_instances(&gt, 0).classes);
    }

    #[test]
    fn boundary3_round_trip_is_exact_on_separated_discs(seed in 0u64..10_000) {
        let gt = random_discs(seed, 2);
        let rec = recover_instances(&one_hot(&boundary_target(&gt, 1).unwrap()), Recovery::Boundary3).unwrap();
        prop_assert_eq!(rec.count(), gt.count());
        let again = recover_instances(&one_hot(&boundary_target(&gt, 1).unwrap()), Recovery::Boundary3).unwrap();
        prop_assert_eq!(&rec, &again);
    }
}
