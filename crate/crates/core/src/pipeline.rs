//! Trained models wrapped for inference on raw-intensity images.

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{AnnotatedPatch, DatasetSplit, Normalization, RawImage};
use crate::error::Result;
use crate::network::{NetworkOutput, UNet};

/// Decision thresholds picked on validation data, one per metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub ap: f64,
    pub seg: f64,
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Joint(UNet<f32>),
    /// Class scores come from `segmenter` applied to the output of `denoiser`.
    Sequential {
        denoiser: UNet<f32>,
        segmenter: UNet<f32>,
    },
}

/// A predictor plus the standardization it was trained under.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub predictor: Predictor,
    pub normalization: Normalization,
    pub thresholds: Option<Thresholds>,
    pub seed: u64,
}

/// Fits standardization on the training patches and applies it to both
/// sides of the split.
pub fn standardize_split(split: &DatasetSplit) -> Result<(DatasetSplit, Normalization)> {
    let norm = Normalization::fit(split.train.iter().map(|p| &p.patch))?;
    let map = |patches: &[AnnotatedPatch]| -> Result<Vec<AnnotatedPatch>> {
        patches
            .iter()
            .map(|p| {
                Ok(AnnotatedPatch {
                    patch: RawImage::new(norm.apply(p.patch.pixels()))?,
                    annotation: p.annotation.clone(),
                })
            })
            .collect()
    };
    Ok((
        DatasetSplit {
            train: map(&split.train)?,
            val: map(&split.val)?,
            split_seed: split.split_seed,
        },
        norm,
    ))
}

/// Extends `grid` to the next multiple of `m` on both axes by repeating
/// the last row and column.
fn pad_to_multiple(grid: &Array2<f32>, m: usize) -> Array2<f32> {
    let (rows, cols) = grid.dim();
    let (pr, pc) = (rows.div_ceil(m) * m, cols.div_ceil(m) * m);
    if (pr, pc) == (rows, cols) {
        return grid.clone();
    }
    Array2::from_shape_fn((pr, pc), |(y, x)| grid[[y.min(rows - 1), x.min(cols - 1)]])
}

fn run(model: &UNet<f32>, images: &[&Array2<f32>]) -> Result<Array4<f32>> {
    let (rows, cols) = images[0].dim();
    let mut input = Array4::<f32>::zeros((images.len(), 1, rows, cols));
    for (j, img) in images.iter().enumerate() {
        input.slice_mut(s![j, 0, .., ..]).assign(*img);
    }
    model.forward_eval(&input)
}

impl InferenceModel {
    /// Channel-0 output in raw intensity units and class scores, for
    /// images of any size; inputs are padded internally and outputs cropped.
    pub fn predict(&self, image: &Array2<f32>) -> Result<NetworkOutput> {
        Ok(self.predict_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Like [`predict`](Self::predict); same-shaped images share a forward pass.
    pub fn predict_batch(&self, images: &[Array2<f32>]) -> Result<Vec<NetworkOutput>> {
        let first = match &self.predictor {
            Predictor::Joint(net) => net,
            Predictor::Sequential { denoiser, .. } => denoiser,
        };
        let m = first.config().size_multiple();
        let mut out = Vec::with_capacity(images.len());
        let mut start = 0;
        while start < images.len() {
            let dim = images[start].dim();
            let mut end = start + 1;
            while end < images.len() && images[end].dim() == dim && end - start < 32 {
                end += 1;
            }
            let padded: Vec<Array2<f32>> = images[start..end]
                .iter()
                .map(|img| pad_to_multiple(&self.normalization.apply(img), m))
                .collect();
            let refs: Vec<&Array2<f32>> = padded.iter().collect();
            let raw = match &self.predictor {
                Predictor::Joint(net) => run(net, &refs)?,
                Predictor::Sequential { denoiser, segmenter } => {
                    let den = run(denoiser, &refs)?;
                    let den_imgs: Vec<Array2<f32>> = den
                        .axis_iter(Axis(0))
                        .map(|c| c.index_axis(Axis(0), 0).to_owned())
                        .collect();
                    let seg = run(segmenter, &den_imgs.iter().collect::<Vec<_>>())?;
                    let mut combined = seg;
                    combined
                        .slice_mut(s![.., 0, .., ..])
                        .assign(&den.slice(s![.., 0, .., ..]));
                    combined
                }
            };
            for j in 0..end - start {
                let channels = raw.slice(s![j, .., ..dim.0, ..dim.1]);
                let mut o = NetworkOutput::from_channels(channels);
                o.denoised = self.normalization.invert(&o.denoised);
                out.push(o);
            }
            start = end;
        }
        Ok(out)
    }
}
