//! Instance segmentation scores (AP, SEG) and PSNR.

use std::collections::BTreeMap;

use ndarray::ArrayView2;

use crate::dataio::InstanceLabelMap;
use crate::error::{ensure, Result};

/// IoU a matched pair must strictly exceed.
pub const AP_IOU_THRESHOLD: f64 = 0.5;

/// Pixel counts of every instance and of every (gt, pred) intersection.
#[derive(Clone, Debug)]
pub struct Overlap {
    pub gt_sizes: Vec<usize>,
    pub pred_sizes: Vec<usize>,
    /// `intersections[g][p]`
    pub intersections: Vec<Vec<usize>>,
}

impl Overlap {
    pub fn new(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Self> {
        ensure!(
            pred.dim() == gt.dim(),
            Input,
            "prediction shape {:?} differs from ground truth shape {:?}",
            pred.dim(),
            gt.dim()
        );
        let index =
            |ids: Vec<u32>| -> BTreeMap<u32, usize> { ids.into_iter().enumerate().map(|(i, v)| (v, i)).collect() };
        let gt_index = index(gt.instance_ids());
        let pred_index = index(pred.instance_ids());
        let mut gt_sizes = vec![0; gt_index.len()];
        let mut pred_sizes = vec![0; pred_index.len()];
        let mut intersections = vec![vec![0; pred_index.len()]; gt_index.len()];
        for (&g, &p) in gt.0.iter().zip(pred.0.iter()) {
            let gi = (g != 0).then(|| gt_index[&g]);
            let pi = (p != 0).then(|| pred_index[&p]);
            if let Some(gi) = gi {
                gt_sizes[gi] += 1;
            }
            if let Some(pi) = pi {
                pred_sizes[pi] += 1;
            }
            if let (Some(gi), Some(pi)) = (gi, pi) {
                intersections[gi][pi] += 1;
            }
        }
        Ok(Self {
            gt_sizes,
            pred_sizes,
            intersections,
        })
    }

    pub fn iou(&self, g: usize, p: usize) -> f64 {
        let inter = self.intersections[g][p];
        let union = self.gt_sizes[g] + self.pred_sizes[p] - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// One-to-one matching by descending IoU, accepting pairs above the
/// threshold. Returns the number of matched pairs.
pub fn greedy_match_count(overlap: &Overlap, iou_threshold: f64) -> usize {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for g in 0..overlap.gt_sizes.len() {
        for p in 0..overlap.pred_sizes.len() {
            if overlap.intersections[g][p] > 0 {
                let iou = overlap.iou(g, p);
                if iou > iou_threshold {
                    candidates.push((iou, g, p));
                }
            }
        }
    }
    // ties resolved by index so the result never depends on hash order
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; overlap.gt_sizes.len()];
    let mut pred_used = vec![false; overlap.pred_sizes.len()];
    let mut matched = 0;
    for (_, g, p) in candidates {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            matched += 1;
        }
    }
    matched
}

/// `TP / (TP + FP + FN)` under one-to-one matching at IoU > 0.5. Two empty
/// maps score 1.
pub fn average_precision(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    let overlap = Overlap::new(pred, gt)?;
    let n_gt = overlap.gt_sizes.len();
    let n_pred = overlap.pred_sizes.len();
    if n_gt == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    let tp = greedy_match_count(&overlap, AP_IOU_THRESHOLD);
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}

/// Mean over ground-truth objects of the Jaccard index with the predicted
/// object covering strictly more than half of it, or 0 when none does.
pub fn seg_score(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    let overlap = Overlap::new(pred, gt)?;
    ensure!(
        !overlap.gt_sizes.is_empty(),
        Input,
        "SEG is undefined for ground truth without instances"
    );
    let mut total = 0.0;
    for (g, &size) in overlap.gt_sizes.iter().enumerate() {
        // at most one prediction can hold a strict majority of the object
        if let Some(p) = (0..overlap.pred_sizes.len()).find(|&p| 2 * overlap.intersections[g][p] > size) {
            total += overlap.iou(g, p);
        }
    }
    Ok(total / overlap.gt_sizes.len() as f64)
}

/// Peak signal-to-noise ratio in dB with the peak taken as the dynamic
/// range of `clean`. Identical images give `f64::INFINITY`.
pub fn psnr(denoised: ArrayView2<f32>, clean: ArrayView2<f32>) -> Result<f64> {
    ensure!(
        denoised.dim() == clean.dim(),
        Input,
        "denoised shape {:?} differs from clean shape {:?}",
        denoised.dim(),
        clean.dim()
    );
    ensure!(!clean.is_empty(), Input, "empty image");
    let (lo, hi) = clean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let range = hi - lo;
    ensure!(range > 0.0, Input, "clean image has zero dynamic range");
    let mse = denoised
        .iter()
        .zip(clean.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}
