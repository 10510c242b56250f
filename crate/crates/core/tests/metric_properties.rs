mod common;

use gscnn::grid::{Grid, LabelMap, IGNORE_LABEL};
use gscnn::metrics::{boundary_fscore, distance_based_eval, iou_report, CropSpec, Evaluator};
use proptest::prelude::*;
use rand::RngExt;

/// Boundary F by exhaustive pair search. A pixel is on the boundary of class
/// `c` when a non-ignored 8-neighbour differs from it in membership of `c`.
fn oracle_fscore(pred: &LabelMap, gt: &LabelMap, classes: usize, tol: f64) -> Vec<Option<f64>> {
    let (h, w) = gt.dims();
    let void = |y: usize, x: usize| gt.get(y, x) == IGNORE_LABEL || pred.get(y, x) == IGNORE_LABEL;
    let edges = |m: &LabelMap, c: u8| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if void(y, x) {
                    continue;
                }
                let inside = m.get(y, x) == c;
                let mut hit = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if !void(yy, xx) && (m.get(yy, xx) == c) != inside {
                            hit = true;
                        }
                    }
                }
                if hit {
                    out.push((y as i64, x as i64));
                }
            }
        }
        out
    };
    let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| -> usize {
        from.iter()
            .filter(|a| to.iter().any(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64) <= tol * tol))
            .count()
    };
    (0..classes as u8)
        .map(|c| {
            let present = (0..h).any(|y| (0..w).any(|x| !void(y, x) && (pred.get(y, x) == c || gt.get(y, x) == c)));
            if !present {
                return None;
            }
            let (pb, gb) = (edges(pred, c), edges(gt, c));
            Some(match (pb.is_empty(), gb.is_empty()) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => {
                    let p = matched(&pb, &gb) as f64 / pb.len() as f64;
                    let r = matched(&gb, &pb) as f64 / gb.len() as f64;
                    if p + r > 0.0 {
                        2.0 * p * r / (p + r)
                    } else {
                        0.0
                    }
                }
            })
        })
        .collect()
}

fn blocky(seed: u64, h: usize, w: usize, k: u8, cells: usize) -> LabelMap {
    let mut r = common::rng(seed);
    let table: Vec<u8> = (0..cells * cells).map(|_| r.random_range(0..k)).collect();
    Grid::from_fn(h, w, |y, x| table[(y * cells / h) * cells + x * cells / w])
}

fn perturb(seed: u64, labels: &LabelMap, k: u8, rate: f64) -> LabelMap {
    let mut r = common::rng(seed);
    labels.map(|l| if r.random::<f64>() < rate { r.random_range(0..k) } else { l })
}

#[test]
fn identical_masks_score_perfectly() {
    for seed in 0..10 {
        let gt = blocky(seed, 24, 30, 4, 5);
        let iou = iou_report(&gt, &gt, 4, IGNORE_LABEL).unwrap();
        assert_eq!(iou.miou, 1.0);
        for tol in [0.0, 1.0, 3.0, 12.0] {
            assert_eq!(boundary_fscore(&gt, &gt, 4, tol, None, IGNORE_LABEL).unwrap().mean, 1.0);
        }
    }
}

#[test]
fn shifted_boundary_matches_oracle() {
    for shift in 0..6 {
        let gt = Grid::from_fn(20, 20, |_, x| (x >= 10) as u8);
        let pred = Grid::from_fn(20, 20, |_, x| (x >= 10 + shift) as u8);
        for tol in [0.0, 1.0, 2.0, 3.0, 5.0] {
            let got = boundary_fscore(&pred, &gt, 2, tol, None, IGNORE_LABEL).unwrap();
            assert_eq!(got.per_class, oracle_fscore(&pred, &gt, 2, tol), "shift {shift} tol {tol}");
        }
    }
}

#[test]
fn random_pairs_match_oracle() {
    for seed in 0..20 {
        let mut gt = blocky(seed, 20, 24, 4, 4);
        for x in 0..24 {
            gt.set(0, x, IGNORE_LABEL);
        }
        let pred = perturb(seed + 100, &blocky(seed + 50, 20, 24, 4, 4), 4, 0.05);
        let void = gt.map(|l| l == IGNORE_LABEL);
        for tol in [1.0, 2.5, 4.0] {
            let got = boundary_fscore(&pred, &gt, 4, tol, Some(&void), IGNORE_LABEL).unwrap();
            assert_eq!(got.per_class, oracle_fscore(&pred, &gt, 4, tol), "seed {seed} tol {tol}");
        }
    }
}

#[test]
fn crop_factor_zero_is_the_base_crop() {
    let crop = CropSpec { base_margin: 4 };
    for seed in 0..10 {
        let gt = blocky(seed, 32, 40, 5, 6);
        let pred = perturb(seed, &gt, 5, 0.2);
        let curve = distance_based_eval(&pred, &gt, 5, IGNORE_LABEL, crop, &[0, 3]).unwrap();
        let base = iou_report(
            &pred.crop(0, 4, 4, 4).unwrap(),
            &gt.crop(0, 4, 4, 4).unwrap(),
            5,
            IGNORE_LABEL,
        )
        .unwrap();
        assert_eq!(curve[0].miou, base.miou);
        let tight = iou_report(
            &pred.crop(3, 7, 10, 10).unwrap(),
            &gt.crop(3, 7, 10, 10).unwrap(),
            5,
            IGNORE_LABEL,
        )
        .unwrap();
        assert_eq!(curve[1].miou, tight.miou);
    }
}

#[test]
fn oversized_crop_names_the_factor() {
    let gt = blocky(1, 16, 16, 3, 4);
    let err = distance_based_eval(&gt, &gt, 3, IGNORE_LABEL, CropSpec { base_margin: 2 }, &[0, 7])
        .unwrap_err()
        .to_string();
    assert!(err.contains('7'), "{err}");
}

#[test]
fn evaluator_pools_counts_over_images() {
    let a = blocky(1, 16, 16, 3, 4);
    let b = blocky(2, 16, 16, 3, 4);
    let mut ev = Evaluator::new(3, IGNORE_LABEL, &[2.0], CropSpec { base_margin: 2 }, &[0]);
    ev.add(&a, &a).unwrap();
    ev.add(&b, &b).unwrap();
    let report = ev.finish();
    assert_eq!(report.miou, 1.0);
    assert_eq!(report.mean_f, vec![1.0]);
    assert_eq!(report.pixel_accuracy, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fscore_grows_with_tolerance(seed: u64, rate in 0.0f64..0.4) {
        let gt = blocky(seed, 24, 24, 4, 5);
        let pred = perturb(seed ^ 1, &blocky(seed ^ 2, 24, 24, 4, 5), 4, rate);
        let mut last = -1.0;
        for tol in [0.0, 1.0, 2.0, 3.0, 5.0, 9.0, 12.0] {
            let f = boundary_fscore(&pred, &gt, 4, tol, None, IGNORE_LABEL).unwrap().mean;
            prop_assert!(f >= last, "tol {} gave {} after {}", tol, f, last);
            last = f;
        }
    }

    #[test]
    fn scores_are_symmetric(seed: u64, rate in 0.0f64..0.5) {
        let gt = blocky(seed, 18, 22, 3, 4);
        let pred = perturb(seed ^ 7, &gt, 3, rate);
        let a = iou_report(&pred, &gt, 3, IGNORE_LABEL).unwrap();
        let b = iou_report(&gt, &pred, 3, IGNORE_LABEL).unwrap();
        prop_assert_eq!(a, b);
        let fa = boundary_fscore(&pred, &gt, 3, 2.0, None, IGNORE_LABEL).unwrap();
        let fb = boundary_fscore(&gt, &pred, 3, 2.0, None, IGNORE_LABEL).unwrap();
        prop_assert_eq!(fa.per_class, fb.per_class);
    }

    #[test]
    fn relabelling_permutes_per_class_scores(seed: u64, rate in 0.0f64..0.5) {
        let perm = [2u8, 0, 3, 1];
        let gt = blocky(seed, 20, 20, 4, 4);
        let pred = perturb(seed ^ 3, &gt, 4, rate);
        let relabel = |m: &LabelMap| m.map(|l| perm[l as usize]);
        let a = iou_report(&pred, &gt, 4, IGNORE_LABEL).unwrap();
        let b = iou_report(&relabel(&pred), &relabel(&gt), 4, IGNORE_LABEL).unwrap();
        let fa = boundary_fscore(&pred, &gt, 4, 1.5, None, IGNORE_LABEL).unwrap();
        let fb = boundary_fscore(&relabel(&pred), &relabel(&gt), 4, 1.5, None, IGNORE_LABEL).unwrap();
        for c in 0..4 {
            prop_assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
            prop_assert_eq!(fa.per_class[c], fb.per_class[perm[c] as usize]);
        }
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((fa.mean - fb.mean).abs() < 1e-12);
    }

    #[test]
    fn iou_is_within_unit_interval(seed: u64, rate in 0.0f64..1.0) {
        let gt = blocky(seed, 12, 12, 5, 3);
        let pred = perturb(seed ^ 9, &gt, 5, rate);
        let r = iou_report(&pred, &gt, 5, IGNORE_LABEL).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        for v in r.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
