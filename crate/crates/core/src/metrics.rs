//! Pixel-level localization metrics.

use crate::error::{Error, Result};
use crate::sampler::percentile_sorted;
use crate::tensor::{BinaryMask, ImageTensor};

/// Area under the step-wise precision–recall curve.
///
/// Thresholds are the unique scores in descending order; a pixel is predicted positive when
/// its score is `>=` the threshold, so tied scores enter together. The area is
/// `Σ (R_k - R_{k-1})·P_k` starting from recall 0, with no extrapolation of precision there.
pub fn auprc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![scores.len()],
            actual: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("AUPRC needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Sørensen–Dice `2|P∩G| / (|P|+|G|)`; 1.0 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    Ok(dice_from_counts(inter, p, g))
}

pub fn dice_from_counts(intersection: usize, pred: usize, gt: usize) -> f64 {
    if pred + gt == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + gt) as f64
    }
}

/// How binarization thresholds are pooled over a set of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DicePooling {
    /// One global threshold, pixel counts summed over the whole set.
    #[default]
    Global,
    /// One global threshold, Dice averaged over images.
    PerImage,
}

/// Result of a threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceSweep {
    pub best_dice: f64,
    pub best_threshold: f64,
    /// `(threshold, dice)` on the reporting quantile grid.
    pub curve: Vec<(f64, f64)>,
}

/// Flattens heatmaps `[B, 1, H, W]` and ground-truth masks into aligned pixel vectors.
pub fn pool_pixels(heatmaps: &ImageTensor, gts: &[BinaryMask]) -> Result<(Vec<f32>, Vec<bool>)> {
    if heatmaps.batch() == 0 || gts.is_empty() {
        return Err(Error::invalid("empty heatmap collection"));
    }
    if heatmaps.channels() != 1 || heatmaps.batch() != gts.len() {
        return Err(Error::invalid(format!(
            "{} heatmaps with {} channels against {} masks",
            heatmaps.batch(),
            heatmaps.channels(),
            gts.len()
        )));
    }
    let mut labels = Vec::with_capacity(heatmaps.len());
    for g in gts {
        if g.height() != heatmaps.height() || g.width() != heatmaps.width() {
            return Err(Error::ShapeMismatch {
                expected: vec![heatmaps.height(), heatmaps.width()],
                actual: vec![g.height(), g.width()],
            });
        }
        labels.extend(g.data().iter().map(|&v| v != 0));
    }
    Ok((heatmaps.data().to_vec(), labels))
}

/// ⌈Dice⌉: the best Dice over every binarization `score > τ`, with `τ` ranging over 0 and
/// every distinct pooled score, using one global threshold and pooled pixel counts.
///
/// The sweep is exact (sort plus cumulative counts), so it dominates any quantile grid.
/// Returns `(best dice, threshold)`; ties keep the smallest threshold.
pub fn ceil_dice(heatmaps: &ImageTensor, gts: &[BinaryMask]) -> Result<(f64, f64)> {
    let (scores, labels) = pool_pixels(heatmaps, gts)?;
    exact_threshold_sweep(&scores, &labels)
}

/// Exact global sweep on flat arrays; see [`ceil_dice`].
pub fn exact_threshold_sweep(scores: &[f32], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("threshold sweep needs aligned nonempty inputs"));
    }
    if scores.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::invalid("heatmap scores must be nonnegative"));
    }
    let gt_total = labels.iter().filter(|&&l| l).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // τ = max(scores) leaves the prediction empty; τ steps down through the distinct values
    let mut best = (dice_from_counts(0, 0, gt_total), scores[order[0]] as f64);
    let (mut pred, mut inter) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            pred += 1;
            inter += labels[order[i]] as usize;
            i += 1;
        }
        // everything with score >= s is now positive, i.e. score > next lower value (or 0)
        let tau = if i < order.len() {
            scores[order[i]] as f64
        } else if s > 0.0 {
            0.0
        } else {
            break;
        };
        let d = dice_from_counts(inter, pred, gt_total);
        if d > best.0 || (d == best.0 && tau < best.1) {
            best = (d, tau);
        }
    }
    Ok(best)
}

/// Reporting grid: quantiles of the pooled scores at `resolution` percent steps plus 0 and max.
pub fn quantile_grid(scores: &[f32], resolution: f64) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    let mut grid = vec![0.0];
    if sorted.is_empty() {
        return grid;
    }
    let steps = (100.0 / resolution).round().max(1.0) as usize;
    for k in 0..=steps {
        grid.push(percentile_sorted(&sorted, 100.0 * k as f64 / steps as f64));
    }
    grid.push(sorted[sorted.len() - 1] as f64);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Dice at each grid threshold with the requested pooling.
pub fn dice_curve(
    heatmaps: &ImageTensor,
    gts: &[BinaryMask],
    grid: &[f64],
    pooling: DicePooling,
) -> Result<Vec<(f64, f64)>> {
    let (scores, labels) = pool_pixels(heatmaps, gts)?;
    let plane = heatmaps.height() * heatmaps.width();
    Ok(grid
        .iter()
        .map(|&tau| {
            let d = match pooling {
                DicePooling::Global => {
                    let (mut inter, mut p, mut g) = (0, 0, 0);
                    for (&s, &l) in scores.iter().zip(&labels) {
                        let pr = s as f64 > tau;
                        p += pr as usize;
                        g += l as usize;
                        inter += (pr && l) as usize;
                    }
                    dice_from_counts(inter, p, g)
                }
                DicePooling::PerImage => {
                    let n = gts.len();
                    (0..n)
                        .map(|b| {
                            let (mut inter, mut p, mut g) = (0, 0, 0);
                            for k in b * plane..(b + 1) * plane {
                                let pr = scores[k] as f64 > tau;
                                p += pr as usize;
                                g += labels[k] as usize;
                                inter += (pr && labels[k]) as usize;
                            }
                            dice_from_counts(inter, p, g)
                        })
                        .sum::<f64>()
                        / n as f64
                }
            };
            (tau, d)
        })
        .collect())
}

/// Full sweep report: exact ⌈Dice⌉ for global pooling, grid maximum for per-image pooling,
/// plus the reporting curve on a 0.5% quantile grid.
pub fn sweep_thresholds(heatmaps: &ImageTensor, gts: &[BinaryMask], pooling: DicePooling) -> Result<DiceSweep> {
    let grid = quantile_grid(heatmaps.data(), 0.5);
    let curve = dice_curve(heatmaps, gts, &grid, pooling)?;
    let (best_dice, best_threshold) = match pooling {
        DicePooling::Global => ceil_dice(heatmaps, gts)?,
        DicePooling::PerImage => curve
            .iter()
            .fold((f64::NEG_INFINITY, 0.0), |acc, &(t, d)| if d > acc.0 { (d, t) } else { acc }),
    };
    Ok(DiceSweep {
        best_dice,
        best_threshold,
        curve,
    })
}

/// Intensity-thresholding baseline: the lesion-salient channel 0 used directly as the score.
pub fn threshold_baseline(image: &ImageTensor) -> ImageTensor {
    let [b, _, h, w] = image.shape();
    ImageTensor::from_fn([b, 1, h, w], |bi, _, y, x| image.get(bi, 0, y, x))
}
