//! From class scores to instance label maps.

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataio::InstanceLabelMap;
use crate::error::{ensure, Result};
use crate::labelgen::FOREGROUND;
use crate::metrics::{average_precision, seg_score};

/// Candidate thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ap,
    Seg,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Ap => "AP",
            Metric::Seg => "SEG",
        })
    }
}

/// Per-pixel softmax probability of the foreground class; `class_scores`
/// is `[3, rows, cols]` ordered background, foreground, border.
pub fn foreground_probability(class_scores: ArrayView3<f32>) -> Result<Array2<f32>> {
    let (c, rows, cols) = class_scores.dim();
    ensure!(c == 3, Input, "expected 3 class channels, got {c}");
    Ok(Array2::from_shape_fn((rows, cols), |(y, x)| {
        let z = [0, 1, 2].map(|k| class_scores[[k, y, x]] as f64);
        let max = z[0].max(z[1]).max(z[2]);
        let e = z.map(|v| (v - max).exp());
        (e[FOREGROUND as usize] / (e[0] + e[1] + e[2])) as f32
    }))
}

/// Labels the 4-connected components of `mask` with ids 1..=K assigned in
/// raster order of each component's first pixel.
pub fn label_components(mask: &Array2<bool>) -> InstanceLabelMap {
    let (rows, cols) = mask.dim();
    let mut parent: Vec<u32> = vec![0];
    let mut provisional = Array2::<u32>::zeros((rows, cols));

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for y in 0..rows {
        for x in 0..cols {
            if !mask[[y, x]] {
                continue;
            }
            let up = if y > 0 { provisional[[y - 1, x]] } else { 0 };
            let left = if x > 0 { provisional[[y, x - 1]] } else { 0 };
            let label = match (up, left) {
                (0, 0) => {
                    let next = parent.len() as u32;
                    parent.push(next);
                    next
                }
                (a, 0) | (0, a) => a,
                (a, b) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    // keep the smaller root so it stays the earliest-seen label
                    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    parent[hi as usize] = lo;
                    lo
                }
            };
            provisional[[y, x]] = label;
        }
    }

    let mut final_id = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut out = Array2::<u32>::zeros((rows, cols));
    for (o, &p) in out.iter_mut().zip(provisional.iter()) {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if final_id[root] == 0 {
            next += 1;
            final_id[root] = next;
        }
        *o = final_id[root];
    }
    InstanceLabelMap(out)
}

fn instances_from_probability(prob: &Array2<f32>, threshold: f64) -> InstanceLabelMap {
    label_components(&prob.mapv(|p| p as f64 > threshold))
}

/// Thresholds the foreground probability and labels 4-connected components.
pub fn extract_instances(class_scores: ArrayView3<f32>, threshold: f64) -> Result<InstanceLabelMap> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        Config,
        "threshold must lie in (0, 1), got {threshold}"
    );
    Ok(instances_from_probability(
        &foreground_probability(class_scores)?,
        threshold,
    ))
}

/// Mean metric over images; for SEG, images without ground-truth objects
/// are skipped. `None` when no image qualifies.
pub fn mean_metric(
    probabilities: &[Array2<f32>],
    ground_truth: &[InstanceLabelMap],
    threshold: f64,
    metric: Metric,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (prob, gt) in probabilities.iter().zip(ground_truth) {
        let pred = instances_from_probability(prob, threshold);
        let score = match metric {
            Metric::Ap => average_precision(&pred, gt)?,
            Metric::Seg => {
                if gt.instance_count() == 0 {
                    continue;
                }
                seg_score(&pred, gt)?
            }
        };
        total += score;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Best threshold on [`threshold_grid`] by mean metric. Ties go to the
/// lowest threshold.
pub fn optimize_threshold(
    predictions: &[ArrayView3<f32>],
    ground_truth: &[InstanceLabelMap],
    metric: Metric,
) -> Result<(f64, f64)> {
    ensure!(
        !predictions.is_empty(),
        Input,
        "no predictions to optimize a threshold on"
    );
    ensure!(
        predictions.len() == ground_truth.len(),
        Input,
        "{} predictions but {} ground-truth maps",
        predictions.len(),
        ground_truth.len()
    );
    let probabilities = predictions
        .iter()
        .map(|p| foreground_probability(*p))
        .collect::<Result<Vec<_>>>()?;
    optimize_threshold_on_probabilities(&probabilities, ground_truth, metric)
}

pub fn optimize_threshold_on_probabilities(
    probabilities: &[Array2<f32>],
    ground_truth: &[InstanceLabelMap],
    metric: Metric,
) -> Result<(f64, f64)> {
    ensure!(
        !probabilities.is_empty(),
        Input,
        "no predictions to optimize a threshold on"
    );
    ensure!(
        probabilities.len() == ground_truth.len(),
        Input,
        "{} predictions but {} ground-truth maps",
        probabilities.len(),
        ground_truth.len()
    );
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid() {
        let Some(score) = mean_metric(probabilities, ground_truth, t, metric)? else {
            return Err(crate::Error::Input(format!(
                "no ground-truth image has objects; {metric} is undefined"
            )));
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((t, score));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::{array, Array3};

    /// Saturated scores: foreground where `mask` is 1, background elsewhere.
    fn scores_from_mask(mask: &Array2<u8>) -> Array3<f32> {
        let (rows, cols) = mask.dim();
        Array3::from_shape_fn((3, rows, cols), |(c, y, x)| {
            let want = if mask[[y, x]] == 1 { 1 } else { 0 };
            if c == want {
                20.0
            } else {
                -20.0
            }
        })
    }

    #[test]
    fn below_threshold_is_empty() {
        let scores = scores_from_mask(&Array2::zeros((4, 4)));
        let out = extract_instances(scores.view(), 0.5).unwrap();
        assert!(out.0.iter().all(|&v| v == 0));
    }

    #[test]
    fn disjoint_blobs_get_consecutive_ids() {
        let mask = array![[1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 1], [0, 0, 1, 0]];
        let out = extract_instances(scores_from_mask(&mask).view(), 0.5).unwrap();
        assert_eq!(out.instance_ids(), vec![1, 2]);
        assert_eq!(out.0[[0, 0]], 1);
        assert_eq!(out.0[[3, 2]], 2);
    }

    #[test]
    fn diagonal_contact_stays_separate() {
        let mask = array![[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]];
        let out = extract_instances(scores_from_mask(&mask).view(), 0.5).unwrap();
        assert_eq!(out.instance_count(), 2);
    }

    #[test]
    fn u_shape_merges_into_one_component() {
        let mask = array![[true, false, true], [true, false, true], [true, true, true]];
        let out = label_components(&mask);
        assert_eq!(out.instance_ids(), vec![1]);
    }

    #[test]
    fn threshold_range_is_checked() {
        let scores = Array3::<f32>::zeros((3, 2, 2));
        for t in [0.0, 1.0, 1.5] {
            assert!(matches!(extract_instances(scores.view(), t), Err(Error::Config(_))));
        }
    }

    #[test]
    fn perfect_predictions_pick_lowest_threshold() {
        let gt = InstanceLabelMap(array![[1, 1, 0, 0], [1, 1, 0, 2], [0, 0, 0, 2], [3, 0, 0, 0]]);
        let mask = gt.0.mapv(|v| u8::from(v != 0));
        let scores = scores_from_mask(&mask);
        for t in threshold_grid() {
            let s = mean_metric(
                &[foreground_probability(scores.view()).unwrap()],
                &[gt.clone()],
                t,
                Metric::Ap,
            )
            .unwrap()
            .unwrap();
            assert_eq!(s, 1.0, "threshold {t}");
        }
        let (t, s) = optimize_threshold(&[scores.view()], &[gt.clone()], Metric::Ap).unwrap();
        assert_eq!((t, s), (0.05, 1.0));
    }

    #[test]
    fn threshold_that_alone_separates_objects() {
        // Two objects of probability 0.52 joined by a bridge of 0.47: lower
        // thresholds merge them, higher ones erase both; only 0.50 splits.
        let gt = InstanceLabelMap(array![[1, 1, 0, 2, 2], [1, 1, 0, 2, 2]]);
        let probs = array![[0.52f32, 0.52, 0.47, 0.52, 0.52], [0.52, 0.52, 0.47, 0.52, 0.52]];
        for t in threshold_grid() {
            let s = mean_metric(&[probs.clone()], &[gt.clone()], t, Metric::Ap)
                .unwrap()
                .unwrap();
            assert_eq!(s > 0.0, t == 0.5, "threshold {t}");
        }
        let t_ok = mean_metric(&[probs.clone()], &[gt.clone()], 0.5, Metric::Ap)
            .unwrap()
            .unwrap();
        assert_eq!(t_ok, 1.0);
        let (t, s) = optimize_threshold_on_probabilities(&[probs], &[gt], Metric::Ap).unwrap();
        assert_eq!((t, s), (0.5, 1.0));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(optimize_threshold(&[], &[], Metric::Ap), Err(Error::Input(_))));
    }

    #[test]
    fn grid_has_nineteen_steps() {
        let grid = threshold_grid();
        assert_eq!(grid.len(), 19);
        assert_eq!(grid[0], 0.05);
        assert_eq!(grid[18], 0.95);
    }
}
