//! Segmentation cross-entropy and the joint denoising/segmentation loss.
//!
//! For a batch of `m` images the joint loss is
//!
//! ```text
//! L = 1/m * sum_i [ alpha * Ld(x_i, f(x_i)) + (1 - alpha) * Ls(y_i, f(x_i)) ]
//! ```
//!
//! where `Ld` is the blind-spot MSE on output channel 0 and `Ls` the
//! cross-entropy on channels 1..=3. Images without ground truth contribute
//! `Ls = 0` but still count towards `m`.

use ndarray::{s, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut3, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::blindspot::{masked_mse, masked_mse_grad, BlindSpotSet};
use crate::error::{ensure, Error, Result};
use crate::labelgen::{ThreeClassMap, NUM_CLASSES};
use crate::network::{NetworkOutput, OUTPUT_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&alpha),
            Config,
            "alpha must lie in [0, 1], got {alpha}"
        );
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Everything the loss needs about one batch element besides the network
/// output: where the blind spots were and what the segmentation target is.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub spots: BlindSpotSet,
    pub target: ThreeClassMap,
}

#[derive(Clone, Debug)]
pub struct TrainingBatch {
    /// Masked network inputs.
    pub inputs: Vec<ndarray::Array2<f32>>,
    pub targets: Vec<LossTarget>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Batch loss with its two weighted-sum ingredients, both already divided
/// by `m`: `total = alpha * denoise + (1 - alpha) * segment`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub denoise: f64,
    pub segment: f64,
}

/// Per-pixel mean of `-log softmax(scores)[true class]`; exactly 0 for an
/// unlabeled target. `class_scores` has shape `[3, rows, cols]`.
pub fn three_class_cross_entropy<T: Float>(class_scores: ArrayView3<T>, target: &ThreeClassMap) -> Result<f64> {
    check_scores(class_scores, target)?;
    if target.is_unlabeled {
        return Ok(0.0);
    }
    let (rows, cols) = target.dim();
    let mut sum = 0.0;
    for y in 0..rows {
        for x in 0..cols {
            let z = [0, 1, 2].map(|c| class_scores[[c, y, x]].to_f64().unwrap_or(f64::NAN));
            let max = z[0].max(z[1]).max(z[2]);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - z[target.classes[[y, x]] as usize];
        }
    }
    Ok(sum / (rows * cols) as f64)
}

fn check_scores<T: Float>(class_scores: ArrayView3<T>, target: &ThreeClassMap) -> Result<()> {
    let (c, rows, cols) = class_scores.dim();
    ensure!(
        c == NUM_CLASSES,
        Contract,
        "expected {NUM_CLASSES} class channels, got {c}"
    );
    ensure!(
        (rows, cols) == target.dim(),
        Contract,
        "class scores {rows}x{cols} do not match target {:?}",
        target.dim()
    );
    if !class_scores.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite class score".into()));
    }
    Ok(())
}

/// Adds `scale * d(cross_entropy)/d(scores)` into `grad`.
fn cross_entropy_grad<T: Float>(
    class_scores: ArrayView3<T>,
    target: &ThreeClassMap,
    scale: T,
    mut grad: ArrayViewMut3<T>,
) {
    if target.is_unlabeled {
        return;
    }
    let (rows, cols) = target.dim();
    let per_pixel = scale / T::from(rows * cols).unwrap();
    for y in 0..rows {
        for x in 0..cols {
            let z = [0, 1, 2].map(|c| class_scores[[c, y, x]]);
            let max = z[0].max(z[1]).max(z[2]);
            let e = z.map(|v| (v - max).exp());
            let total = e[0] + e[1] + e[2];
            let truth = target.classes[[y, x]] as usize;
            for c in 0..NUM_CLASSES {
                let p = e[c] / total;
                let indicator = if c == truth { T::one() } else { T::zero() };
                grad[[c, y, x]] = grad[[c, y, x]] + per_pixel * (p - indicator);
            }
        }
    }
}

/// Joint loss over network outputs of shape `[m, 4, rows, cols]`. When
/// `with_grad` is set, also returns dL/d(outputs).
pub fn joint_loss_with_grad<T: Float>(
    outputs: ArrayView4<T>,
    targets: &[LossTarget],
    weights: LossWeights,
    with_grad: bool,
) -> Result<(LossParts, Option<Array4<T>>)> {
    let m = targets.len();
    ensure!(m >= 1, Contract, "empty batch");
    ensure!(
        outputs.len_of(Axis(0)) == m,
        Contract,
        "{} outputs for a batch of {m}",
        outputs.len_of(Axis(0))
    );
    ensure!(
        outputs.len_of(Axis(1)) == OUTPUT_CHANNELS,
        Contract,
        "expected {OUTPUT_CHANNELS} output channels, got {}",
        outputs.len_of(Axis(1))
    );
    let alpha = weights.alpha();
    let mut parts = LossParts::default();
    let mut grad = with_grad.then(|| Array4::<T>::zeros(outputs.raw_dim()));
    let inv_m = 1.0 / m as f64;
    for (i, item) in targets.iter().enumerate() {
        let out = outputs.index_axis(Axis(0), i);
        let denoised: ArrayView2<T> = out.index_axis(Axis(0), 0);
        let scores = out.slice(s![1..4, .., ..]);
        let ld = masked_mse(denoised, &item.spots)?;
        let ls = three_class_cross_entropy(scores, &item.target)?;
        parts.denoise += ld * inv_m;
        parts.segment += ls * inv_m;
        if let Some(g) = grad.as_mut() {
            let mut gi = g.index_axis_mut(Axis(0), i);
            if alpha > 0.0 {
                let scale = T::from(alpha * inv_m).unwrap();
                masked_mse_grad(denoised, &item.spots, scale, gi.index_axis_mut(Axis(0), 0))?;
            }
            if alpha < 1.0 {
                let scale = T::from((1.0 - alpha) * inv_m).unwrap();
                cross_entropy_grad(scores, &item.target, scale, gi.slice_mut(s![1..4, .., ..]));
            }
        }
    }
    parts.total = alpha * parts.denoise + (1.0 - alpha) * parts.segment;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "joint loss is not finite (denoise {}, segment {})",
            parts.denoise, parts.segment
        )));
    }
    Ok((parts, grad))
}

/// Joint loss of a batch given one [`NetworkOutput`] per element.
pub fn joint_loss(batch: &TrainingBatch, outputs: &[NetworkOutput], weights: LossWeights) -> Result<f64> {
    ensure!(
        outputs.len() == batch.len(),
        Contract,
        "{} outputs for a batch of {}",
        outputs.len(),
        batch.len()
    );
    ensure!(!batch.is_empty(), Contract, "empty batch");
    let stacked = NetworkOutput::stack(outputs)?;
    Ok(joint_loss_with_grad(stacked.view(), &batch.targets, weights, false)?
        .0
        .total)
}
