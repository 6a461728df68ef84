//! Metrics checked against brute-force enumeration.

use cfdiff::metrics::{
    auprc, ceil_dice, dice, dice_curve, quantile_grid, sweep_thresholds, threshold_baseline, DicePooling,
};
use cfdiff::tensor::{BinaryMask, ImageTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Precision/recall recounted from scratch at every distinct threshold.
fn brute_auprc(scores: &[f32], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_r = 0.0;
    let mut area = 0.0;
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && l).count() as f64;
        let pp = scores.iter().filter(|&&s| s >= th).count() as f64;
        let r = tp / pos;
        area += (r - prev_r) * (tp / pp);
        prev_r = r;
    }
    area
}

/// Best pooled Dice over every threshold that changes the predicted set.
fn brute_ceil_dice(scores: &[f32], labels: &[bool]) -> f64 {
    let mut cands: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    cands.push(0.0);
    cands
        .iter()
        .map(|&tau| {
            let pred: Vec<bool> = scores.iter().map(|&s| s as f64 > tau).collect();
            dice(&pred, labels).unwrap()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<BinaryMask>) {
    let n = rng.random_range(1..=4usize);
    let h = rng.random_range(1..=15usize);
    let w = rng.random_range(1..=15usize);
    // coarse levels force ties
    let levels = rng.random_range(2..=40u32);
    let p = rng.random_range(0.05..0.6);
    let masks: Vec<BinaryMask> = (0..n)
        .map(|_| BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p)))
        .collect();
    let hm = ImageTensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let base = rng.random_range(0..levels) as f32 / levels as f32;
        if masks[b].get(y, x) {
            base + 0.3
        } else {
            base
        }
    });
    (hm, masks)
}

fn flatten(masks: &[BinaryMask]) -> Vec<bool> {
    masks.iter().flat_map(|m| m.data().iter().map(|&v| v != 0)).collect()
}

#[test]
fn auprc_and_ceil_dice_match_brute_force_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 100 {
        let (hm, masks) = random_instance(&mut rng);
        let labels = flatten(&masks);
        assert!(labels.len() <= 1000);
        if !labels.iter().any(|&l| l) {
            continue;
        }
        let a = auprc(hm.data(), &labels).unwrap();
        assert!((a - brute_auprc(hm.data(), &labels)).abs() < 1e-9);
        let (d, tau) = ceil_dice(&hm, &masks).unwrap();
        assert!((d - brute_ceil_dice(hm.data(), &labels)).abs() < 1e-9);
        let pred: Vec<bool> = hm.data().iter().map(|&s| s as f64 > tau).collect();
        assert!((dice(&pred, &labels).unwrap() - d).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn dice_hand_cases() {
    let pred = [true, true, false, false, false, false];
    let gt = [true, true, true, true, false, false];
    assert!((dice(&pred, &gt).unwrap() - 2.0 * 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(dice(&gt, &gt).unwrap(), 1.0);
    assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
    assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
    assert!(dice(&[true], &[true, false]).is_err());
}

#[test]
fn auprc_edge_cases() {
    assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    let labels = [true, false, false, true, false];
    let a = auprc(&[0.5; 5], &labels).unwrap();
    assert!((a - 0.4).abs() < 1e-15);
    assert!((a - brute_auprc(&[0.5; 5], &labels)).abs() < 1e-15);
    assert!(auprc(&[0.1, 0.2], &[false, false]).is_err());
    assert!(auprc(&[0.1], &[false, true]).is_err());
}

#[test]
fn ceil_dice_on_exact_ground_truth() {
    let masks = vec![
        BinaryMask::from_fn(4, 4, |y, x| y == x),
        BinaryMask::from_fn(4, 4, |y, _| y == 0),
    ];
    let hm = ImageTensor::from_fn([2, 1, 4, 4], |b, _, y, x| masks[b].get(y, x) as u8 as f32);
    let (d, tau) = ceil_dice(&hm, &masks).unwrap();
    assert_eq!(d, 1.0);
    assert!((0.0..1.0).contains(&tau));
    assert!(ceil_dice(&ImageTensor::zeros([0, 1, 4, 4]), &[]).is_err());
}

#[test]
fn three_tiny_heatmaps() {
    let vals: [[f32; 4]; 3] = [[0.1, 0.7, 0.2, 0.0], [0.9, 0.3, 0.3, 0.05], [0.0, 0.0, 0.6, 0.4]];
    let gt: [[bool; 4]; 3] = [
        [false, true, false, false],
        [true, true, false, false],
        [false, false, true, false],
    ];
    let hm = ImageTensor::from_fn([3, 1, 2, 2], |b, _, y, x| vals[b][y * 2 + x]);
    let masks: Vec<BinaryMask> = gt
        .iter()
        .map(|g| BinaryMask::from_fn(2, 2, |y, x| g[y * 2 + x]))
        .collect();
    let (d, _) = ceil_dice(&hm, &masks).unwrap();
    assert!((d - brute_ceil_dice(hm.data(), &flatten(&masks))).abs() < 1e-12);
    // τ = 0.4 keeps {0.7, 0.9, 0.6}: 3 of 4 positives and no false positives, 6/7
    assert!((d - 6.0 / 7.0).abs() < 1e-12, "{d}");
}

#[test]
fn ceil_dice_dominates_grid_and_finer_grid_never_loses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let (hm, masks) = random_instance(&mut rng);
        if !flatten(&masks).iter().any(|&l| l) {
            continue;
        }
        let (best, _) = ceil_dice(&hm, &masks).unwrap();
        let coarse = dice_curve(&hm, &masks, &quantile_grid(hm.data(), 0.5), DicePooling::Global).unwrap();
        let fine = dice_curve(&hm, &masks, &quantile_grid(hm.data(), 0.25), DicePooling::Global).unwrap();
        let max = |c: &[(f64, f64)]| c.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        assert!(coarse.iter().all(|&(_, d)| d <= best + 1e-12));
        assert!(max(&fine) >= max(&coarse) - 0.005);
        let sweep = sweep_thresholds(&hm, &masks, DicePooling::Global).unwrap();
        assert_eq!(sweep.best_dice, best);
        let per_image = sweep_thresholds(&hm, &masks, DicePooling::PerImage).unwrap();
        assert!((0.0..=1.0).contains(&per_image.best_dice));
    }
}

#[test]
fn threshold_baseline_is_channel_zero() {
    let zeros = ImageTensor::zeros([2, 2, 3, 3]);
    assert!(threshold_baseline(&zeros).data().iter().all(|&v| v == 0.0));
    let img = ImageTensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c * 10 + y * 3 + x) as f32);
    let hm = threshold_baseline(&img);
    assert_eq!(hm.shape(), [1, 1, 3, 3]);
    for y in 0..3 {
        for x in 0..3 {
            assert_eq!(hm.get(0, 0, y, x), img.get(0, 0, y, x));
        }
    }
}

proptest! {
    #[test]
    fn dice_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = a.iter().map(|_| rng.random_bool(0.5)).collect();
        let d1 = dice(&a, &b).unwrap();
        prop_assert_eq!(d1, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn auprc_in_unit_interval(scores in proptest::collection::vec(0.0f32..1.0, 2..100), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        let a = auprc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - brute_auprc(&scores, &labels)).abs() < 1e-9);
    }
}
