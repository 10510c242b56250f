mod common;

use gscnn::fusion::CategoricalMap;
use gscnn::graph::{Graph, StraightThrough};
use gscnn::grid::{Grid, LabelMap, IGNORE_LABEL};
use gscnn::losses::{
    boundary_potential, gt_boundary_potential, gumbel_noise, one_hot, reg_loss_boundary, total_loss, DualTask,
    LossConfig, LossTargets, PositiveSet,
};
use gscnn::metrics::gt_boundary_from_mask;
use gscnn::tensor::Tensor;
use proptest::prelude::*;
use rand::RngExt;

/// Blocky random labels with an ignore border.
fn random_labels(seed: u64, h: usize, w: usize, k: usize, border: usize) -> LabelMap {
    let mut r = common::rng(seed);
    let cells: Vec<u8> = (0..16).map(|_| r.random_range(0..k as u8)).collect();
    Grid::from_fn(h, w, |y, x| {
        if y < border || x < border || y + border >= h || x + border >= w {
            IGNORE_LABEL
        } else {
            cells[(y * 4 / h) * 4 + x * 4 / w]
        }
    })
}

fn random_config(seed: u64) -> LossConfig {
    let mut r = common::rng(seed ^ 0x5eed);
    LossConfig {
        bce_weight: r.random_range(0.0..30.0),
        ce_weight: r.random_range(0.0..3.0),
        reg_boundary_weight: r.random_range(0.0..3.0),
        reg_semantic_weight: r.random_range(0.0..3.0),
        tau: r.random_range(0.3..2.0),
        thrs: r.random_range(0.2..0.9),
        positive_set: if r.random::<bool>() { PositiveSet::Union } else { PositiveSet::Intersection },
        ..LossConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn total_is_the_weighted_sum(seed: u64, k in 2usize..5, h in 6usize..14, w in 6usize..14) {
        let mut r = common::rng(seed);
        let labels = random_labels(seed, h, w, k, 1);
        let gt_b = gt_boundary_from_mask(&labels, 1, IGNORE_LABEL);
        let cfg = random_config(seed);

        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&Tensor::new(&[k, h, w], common::uniform(&mut r, k * h * w)).unwrap().with_grad());
        let probs = g.softmax_channels(logits).unwrap();
        let seg = CategoricalMap { logits, probs, classes: k };
        let raw = g.leaf(&Tensor::new(&[1, h, w], common::uniform(&mut r, h * w)).unwrap().with_grad());
        let s = g.sigmoid(raw);
        let noise = gumbel_noise::<f64, _>(&mut r, k * h * w);
        let targets = LossTargets { labels: &labels, gt_boundary: &gt_b, ignore: IGNORE_LABEL };
        let dual = DualTask { noise: Some(&noise), mode: StraightThrough::Hard };
        let (total, parts) = total_loss(&mut g, Some(s), &seg, &targets, &cfg, Some(dual)).unwrap();

        let expected = cfg.bce_weight * parts.bce
            + cfg.ce_weight * parts.ce
            + cfg.reg_boundary_weight * parts.reg_fwd
            + cfg.reg_semantic_weight * parts.reg_bwd;
        prop_assert!((g.item(total) - expected).abs() <= 1e-6);
        prop_assert_eq!(parts.total, g.item(total));
        prop_assert!(parts.bce >= 0.0 && parts.ce >= 0.0 && parts.reg_fwd >= 0.0 && parts.reg_bwd >= 0.0);
    }

    #[test]
    fn ground_truth_potential_agrees_with_itself(seed: u64, k in 2usize..5, h in 4usize..16, w in 4usize..16) {
        let labels = random_labels(seed, h, w, k, 0);
        let cfg = LossConfig::default();
        let mut g = Graph::<f64>::new();
        let onehot = g.constant(&[k, h, w], one_hot(&labels, k, IGNORE_LABEL).unwrap()).unwrap();
        let zeta = boundary_potential(&mut g, onehot, &cfg, None, StraightThrough::Hard).unwrap();
        let zeta_hat = gt_boundary_potential::<f64>(&labels, k, IGNORE_LABEL, &cfg).unwrap();
        for set in [PositiveSet::Union, PositiveSet::Intersection] {
            let l = reg_loss_boundary(&mut g, zeta, &zeta_hat, None, cfg.zeta_eps, set).unwrap();
            prop_assert_eq!(g.item(l), 0.0);
        }
    }
}

#[test]
fn certain_correct_prediction_costs_nothing() {
    for seed in 0..10 {
        let (k, h, w) = (4, 16, 16);
        let labels = random_labels(seed, h, w, k, 2);
        let gt_b = gt_boundary_from_mask(&labels, 1, IGNORE_LABEL);
        // Ignored pixels get an arbitrary class; they are excluded everywhere.
        let filled = labels.map(|l| if l == IGNORE_LABEL { 0 } else { l });
        let certain: Vec<f64> = one_hot::<f64>(&filled, k, IGNORE_LABEL)
            .unwrap()
            .into_iter()
            .map(|v| 100.0 * v)
            .collect();

        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&Tensor::new(&[k, h, w], certain).unwrap().with_grad());
        let probs = g.softmax_channels(logits).unwrap();
        let seg = CategoricalMap { logits, probs, classes: k };
        let s_data = gt_b.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let s = g.leaf(&Tensor::new(&[1, h, w], s_data).unwrap().with_grad());
        let targets = LossTargets { labels: &labels, gt_boundary: &gt_b, ignore: IGNORE_LABEL };
        let dual = DualTask { noise: None, mode: StraightThrough::Hard };
        let (total, parts) = total_loss(&mut g, Some(s), &seg, &targets, &LossConfig::default(), Some(dual)).unwrap();
        assert!(g.item(total) <= 1e-4, "seed {seed}: {parts:?}");
        assert_eq!(parts.reg_fwd, 0.0);
    }
}

#[test]
fn disabled_terms_contribute_nothing() {
    let (k, h, w) = (3, 10, 10);
    let labels = random_labels(4, h, w, k, 1);
    let gt_b = gt_boundary_from_mask(&labels, 1, IGNORE_LABEL);
    let mut r = common::rng(4);
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(&Tensor::new(&[k, h, w], common::uniform(&mut r, k * h * w)).unwrap().with_grad());
    let probs = g.softmax_channels(logits).unwrap();
    let seg = CategoricalMap { logits, probs, classes: k };
    let targets = LossTargets { labels: &labels, gt_boundary: &gt_b, ignore: IGNORE_LABEL };
    let (total, parts) = total_loss(&mut g, None, &seg, &targets, &LossConfig::default(), None).unwrap();
    assert_eq!((parts.bce, parts.reg_fwd, parts.reg_bwd), (0.0, 0.0, 0.0));
    assert_eq!(g.item(total), parts.ce);
}
