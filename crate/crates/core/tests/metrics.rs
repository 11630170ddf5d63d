mod common;

use common::rng;
use maskmatch::metrics::{
    boundary_counts, boundary_fscore, class_boundary, squared_distance_transform, BoundaryCounts,
    ConfusionMatrix, Evaluator,
};
use rand::Rng;

/// All-pairs matching: a boundary pixel matches if any boundary pixel of the
/// same class in the other map lies within `radius`.
fn brute_force(pred: &[u8], gt: &[u8], h: usize, w: usize, radius: usize) -> BoundaryCounts {
    let mut counts = BoundaryCounts::default();
    let r2 = (radius * radius) as i64;
    let classes: std::collections::BTreeSet<u8> = gt.iter().copied().filter(|&c| c > 0).collect();
    for class in classes {
        let bp = class_boundary(pred, h, w, class);
        let bg = class_boundary(gt, h, w, class);
        let points = |b: &[bool]| -> Vec<(i64, i64)> {
            (0..h * w)
                .filter(|&i| b[i])
                .map(|i| ((i / w) as i64, (i % w) as i64))
                .collect()
        };
        let (pp, gp) = (points(&bp), points(&bg));
        let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| {
            from.iter()
                .filter(|(y, x)| to.iter().any(|(ty, tx)| (y - ty).pow(2) + (x - tx).pow(2) <= r2))
                .count() as u64
        };
        counts.pred_matched += matched(&pp, &gp);
        counts.pred_total += pp.len() as u64;
        counts.gt_matched += matched(&gp, &pp);
        counts.gt_total += gp.len() as u64;
    }
    counts
}

fn random_map(h: usize, w: usize, classes: u8, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut map = vec![0u8; h * w];
    for _ in 0..r.gen_range(1..5) {
        let c = r.gen_range(1..classes);
        let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
        let (y1, x1) = (r.gen_range(y0..h) + 1, r.gen_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                map[y * w + x] = c;
            }
        }
    }
    // Sprinkle isolated noise pixels.
    for _ in 0..(h * w / 20) {
        let i = r.gen_range(0..h * w);
        map[i] = r.gen_range(0..classes);
    }
    map
}

#[test]
fn miou_fixture() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0u8, 1, 1, 1], &[0u8, 1, 0, 1]).unwrap();
    let (_, miou) = cm.miou().unwrap();
    assert!((miou - 0.5833).abs() < 1e-4);
    assert!((miou - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn absent_classes_are_excluded() {
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&[0u8, 1, 1, 0], &[0u8, 1, 1, 0]).unwrap();
    let (per, miou) = cm.miou().unwrap();
    assert_eq!(per[2], None);
    assert_eq!(per[3], None);
    assert_eq!(miou, 1.0);
}

#[test]
fn distance_transform_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(1..20), r.gen_range(1..20));
        let f: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.1)).collect();
        if !f.iter().any(|&b| b) {
            continue;
        }
        let d = squared_distance_transform(&f, h, w);
        for y in 0..h {
            for x in 0..w {
                let best = (0..h * w)
                    .filter(|&i| f[i])
                    .map(|i| {
                        let (fy, fx) = ((i / w) as f64, (i % w) as f64);
                        (fy - y as f64).powi(2) + (fx - x as f64).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[y * w + x], best, "seed {seed} at ({y},{x})");
            }
        }
    }
}

#[test]
fn boundary_matching_matches_brute_force() {
    for seed in 0..20u64 {
        let mut r = rng(seed + 1000);
        let (h, w) = (r.gen_range(4..=32), r.gen_range(4..=32));
        let gt = random_map(h, w, 4, seed);
        let pred = random_map(h, w, 4, seed + 500);
        for radius in [1, 2, 3] {
            let fast = boundary_counts(&pred, &gt, h, w, radius).unwrap();
            let slow = brute_force(&pred, &gt, h, w, radius);
            assert_eq!(fast, slow, "seed {seed} radius {radius}");
        }
    }
}

#[test]
fn boundary_score_cases() {
    let mut gt = vec![0u8; 100];
    for y in 3..7 {
        for x in 3..7 {
            gt[y * 10 + x] = 2;
        }
    }
    assert_eq!(boundary_fscore(&gt, &gt, 10, 10, 0.0003).unwrap().2, 1.0);
    assert_eq!(boundary_fscore(&vec![0; 100], &gt, 10, 10, 0.0003).unwrap().2, 0.0);
    // Shifting the square by one pixel stays within the minimum tolerance of 1.
    let mut shifted = vec![0u8; 100];
    for y in 4..8 {
        for x in 3..7 {
            shifted[y * 10 + x] = 2;
        }
    }
    let (p, r, f) = boundary_fscore(&shifted, &gt, 10, 10, 0.0003).unwrap();
    assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    assert!(boundary_fscore(&gt, &gt, 10, 10, -1.0).is_err());
}

#[test]
fn evaluator_is_deterministic() {
    let gt = random_map(16, 16, 3, 1);
    let pred = random_map(16, 16, 3, 2);
    let run = || {
        let mut ev = Evaluator::new(3, 0.0003);
        ev.add(&pred, &gt, 16, 16).unwrap();
        ev.add(&gt, &gt, 16, 16).unwrap();
        ev.finish("val", 7).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert!((0.0..=1.0).contains(&a.miou));
}
