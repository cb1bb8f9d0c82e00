//! Images, instance annotations, patches and the data preparation steps that
//! turn raw microscopy-like images into training material.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed::{child_seed, rng};

/// Background intensity of synthetic images.
pub const SYNTHETIC_BACKGROUND: f32 = 0.2;
/// Object intensity of synthetic images.
pub const SYNTHETIC_FOREGROUND: f32 = 0.8;
/// Range of ellipse semi-axis lengths (pixels) of synthetic objects.
pub const SYNTHETIC_AXIS_RANGE: (f64, f64) = (4.0, 12.0);

/// Default side length of training patches.
pub const DEFAULT_PATCH_SIZE: usize = 128;
/// Default fraction of patches placed in the training split.
pub const DEFAULT_TRAIN_RATIO: f64 = 0.85;

/// A single-channel image, optionally paired with its noise-free version.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pixels: Array2<f32>,
    clean_reference: Option<Array2<f32>>,
}

impl RawImage {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        ensure!(
            pixels.nrows() >= 1 && pixels.ncols() >= 1,
            Input,
            "image must be at least 1x1, got {:?}",
            pixels.dim()
        );
        ensure!(
            pixels.iter().all(|v| v.is_finite()),
            Input,
            "image contains non-finite values"
        );
        Ok(Self {
            pixels,
            clean_reference: None,
        })
    }

    pub fn with_clean(pixels: Array2<f32>, clean: Array2<f32>) -> Result<Self> {
        ensure!(
            pixels.dim() == clean.dim(),
            Input,
            "clean reference shape {:?} differs from image shape {:?}",
            clean.dim(),
            pixels.dim()
        );
        ensure!(
            clean.iter().all(|v| v.is_finite()),
            Input,
            "clean reference contains non-finite values"
        );
        let mut image = Self::new(pixels)?;
        image.clean_reference = Some(clean);
        Ok(image)
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn clean_reference(&self) -> Option<&Array2<f32>> {
        self.clean_reference.as_ref()
    }

    /// (rows, cols)
    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn into_parts(self) -> (Array2<f32>, Option<Array2<f32>>) {
        (self.pixels, self.clean_reference)
    }

    fn map_grids(&self, f: impl Fn(ArrayView2<f32>) -> Array2<f32>) -> Self {
        Self {
            pixels: f(self.pixels.view()),
            clean_reference: self.clean_reference.as_ref().map(|c| f(c.view())),
        }
    }
}

/// Instance segmentation: 0 is background, every positive id one object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap(pub Array2<u32>);

impl InstanceLabelMap {
    pub fn zeros(dim: (usize, usize)) -> Self {
        Self(Array2::zeros(dim))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, u32> {
        self.0.view()
    }

    /// Distinct non-zero ids, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.0.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    /// Renumbers instances 1..=K in raster order of first appearance.
    pub fn relabeled(&self) -> Self {
        let mut mapping: HashMap<u32, u32> = HashMap::new();
        let out = self.0.mapv(|v| {
            if v == 0 {
                0
            } else {
                let next = mapping.len() as u32 + 1;
                *mapping.entry(v).or_insert(next)
            }
        });
        Self(out)
    }
}

/// Segmentation ground truth of a patch, or the marker that none exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Annotation {
    Labeled(InstanceLabelMap),
    Unlabeled,
}

impl Annotation {
    pub fn is_labeled(&self) -> bool {
        matches!(self, Annotation::Labeled(_))
    }

    pub fn labels(&self) -> Option<&InstanceLabelMap> {
        match self {
            Annotation::Labeled(map) => Some(map),
            Annotation::Unlabeled => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPatch {
    pub patch: RawImage,
    pub annotation: Annotation,
}

impl AnnotatedPatch {
    pub fn new(patch: RawImage, annotation: Annotation) -> Result<Self> {
        if let Annotation::Labeled(labels) = &annotation {
            ensure!(
                labels.dim() == patch.dim(),
                Input,
                "annotation shape {:?} differs from patch shape {:?}",
                labels.dim(),
                patch.dim()
            );
        }
        Ok(Self { patch, annotation })
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedPatch>,
    pub val: Vec<AnnotatedPatch>,
    pub split_seed: u64,
}

/// Per-dataset standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Statistics over every pixel of the given patches.
    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a RawImage>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = 0f64;
        let mut sum_sq = 0f64;
        for image in patches {
            for &v in image.pixels() {
                let v = v as f64;
                count += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        ensure!(count > 0, Input, "cannot fit normalization on no pixels");
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self {
            mean: mean as f32,
            std: std as f32,
        })
    }

    pub fn apply(&self, grid: &Array2<f32>) -> Array2<f32> {
        grid.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, grid: &Array2<f32>) -> Array2<f32> {
        grid.mapv(|v| v * self.std + self.mean)
    }
}

/// Renders `image_count` images of non-overlapping elliptical objects on a
/// darker background. Object counts are drawn uniformly from the inclusive
/// `object_count_range`.
pub fn generate_blobs(
    image_count: usize,
    side: usize,
    object_count_range: (usize, usize),
    seed: u64,
) -> Result<Vec<(RawImage, InstanceLabelMap)>> {
    let (min_objects, max_objects) = object_count_range;
    ensure!(side >= 32, Config, "synthetic image side must be >= 32, got {side}");
    ensure!(
        min_objects <= max_objects,
        Config,
        "object count range [{min_objects}, {max_objects}] is empty"
    );
    (0..image_count)
        .map(|i| render_blob_image(side, object_count_range, child_seed(seed, "blobs", i as u64)))
        .collect()
}

fn render_blob_image(
    side: usize,
    (min_objects, max_objects): (usize, usize),
    seed: u64,
) -> Result<(RawImage, InstanceLabelMap)> {
    const MAX_ATTEMPTS: usize = 1000;
    let mut rng = rng(seed);
    let target = rng.random_range(min_objects..=max_objects);
    let mut labels = Array2::<u32>::zeros((side, side));
    let (axis_lo, axis_hi) = SYNTHETIC_AXIS_RANGE;

    for id in 1..=target as u32 {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let a = rng.random_range(axis_lo..=axis_hi);
            let b = rng.random_range(axis_lo..=axis_hi);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cy = rng.random_range(0.0..side as f64);
            let cx = rng.random_range(0.0..side as f64);
            let (sin, cos) = theta.sin_cos();
            let reach = a.max(b).ceil() as isize + 1;
            let mut footprint = Vec::new();
            let mut collides = false;
            let (y0, x0) = (cy.floor() as isize, cx.floor() as isize);
            for y in (y0 - reach).max(0)..=(y0 + reach).min(side as isize - 1) {
                for x in (x0 - reach).max(0)..=(x0 + reach).min(side as isize - 1) {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    let u = (dx * cos + dy * sin) / a;
                    let v = (-dx * sin + dy * cos) / b;
                    if u * u + v * v <= 1.0 {
                        if labels[[y as usize, x as usize]] != 0 {
                            collides = true;
                            break;
                        }
                        footprint.push((y as usize, x as usize));
                    }
                }
                if collides {
                    break;
                }
            }
            if collides || footprint.is_empty() {
                continue;
            }
            for (y, x) in footprint {
                labels[[y, x]] = id;
            }
            placed = true;
            break;
        }
        ensure!(
            placed,
            Config,
            "could not place {target} non-overlapping objects in a {side}x{side} image"
        );
    }

    let pixels = labels.mapv(|v| {
        if v == 0 {
            SYNTHETIC_BACKGROUND
        } else {
            SYNTHETIC_FOREGROUND
        }
    });
    let image = RawImage::with_clean(pixels.clone(), pixels)?;
    Ok((image, InstanceLabelMap(labels)))
}

/// Non-overlapping top-left anchored tiling; remainders narrower than `size`
/// are dropped. Annotations are cropped identically and renumbered per patch.
pub fn extract_patches(
    image: &RawImage,
    annotation: Option<&InstanceLabelMap>,
    size: usize,
) -> Result<Vec<AnnotatedPatch>> {
    let (rows, cols) = image.dim();
    ensure!(size >= 1, Config, "patch size must be positive");
    ensure!(
        rows >= size && cols >= size,
        Input,
        "image of {rows}x{cols} is smaller than patch size {size}"
    );
    if let Some(labels) = annotation {
        ensure!(
            labels.dim() == image.dim(),
            Input,
            "annotation shape {:?} differs from image shape {:?}",
            labels.dim(),
            image.dim()
        );
    }
    let mut patches = Vec::with_capacity((rows / size) * (cols / size));
    for ty in 0..rows / size {
        for tx in 0..cols / size {
            let window = s![ty * size..(ty + 1) * size, tx * size..(tx + 1) * size];
            let patch = image.map_grids(|g| g.slice(window).to_owned());
            let annotation = match annotation {
                Some(labels) => Annotation::Labeled(InstanceLabelMap(labels.0.slice(window).to_owned()).relabeled()),
                None => Annotation::Unlabeled,
            };
            patches.push(AnnotatedPatch { patch, annotation });
        }
    }
    Ok(patches)
}

/// Seeded random permutation, first `floor(ratio * n)` to training.
pub fn split_train_val(patches: Vec<AnnotatedPatch>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    ensure!(
        ratio > 0.0 && ratio < 1.0,
        Config,
        "train ratio must lie in (0, 1), got {ratio}"
    );
    let n = patches.len();
    ensure!(n >= 2, Input, "need at least 2 patches to split, got {n}");
    // The epsilon absorbs representation error, e.g. 0.85 * 100.
    let n_train = ((ratio * n as f64) + 1e-9).floor() as usize;
    ensure!(
        n_train >= 1 && n_train < n,
        Config,
        "ratio {ratio} leaves an empty split for {n} patches"
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let mut slots: Vec<Option<AnnotatedPatch>> = patches.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("permutation visits each index once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let val = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(DatasetSplit {
        train,
        val,
        split_seed: seed,
    })
}

/// Adds i.i.d. zero-mean Gaussian noise without clipping. The input pixels
/// become the clean reference of the result.
pub fn add_gaussian_noise(image: &RawImage, sigma: f64, seed: u64) -> Result<RawImage> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        Config,
        "noise sigma must be non-negative, got {sigma}"
    );
    let clean = image.pixels().clone();
    let mut noisy = clean.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng(seed);
        for v in noisy.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    RawImage::with_clean(noisy, clean)
}

/// Keeps `keep_count` uniformly chosen annotations; every other annotation is
/// replaced by [`Annotation::Unlabeled`]. Pixel data is never touched.
pub fn select_labeled_subset(
    mut patches: Vec<AnnotatedPatch>,
    keep_count: usize,
    seed: u64,
) -> Result<Vec<AnnotatedPatch>> {
    let annotated: Vec<usize> = patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.annotation.is_labeled())
        .map(|(i, _)| i)
        .collect();
    ensure!(
        keep_count <= annotated.len(),
        Config,
        "cannot keep {keep_count} annotations, only {} available",
        annotated.len()
    );
    let mut keep = vec![false; annotated.len()];
    for j in index::sample(&mut rng(seed), annotated.len(), keep_count) {
        keep[j] = true;
    }
    for (j, &i) in annotated.iter().enumerate() {
        if !keep[j] {
            patches[i].annotation = Annotation::Unlabeled;
        }
    }
    Ok(patches)
}

/// One element of the dihedral group of the square: `rotations` quarter
/// turns counter-clockwise, preceded by a horizontal flip when `flip` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        rotations: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::from_index(i as u8))
    }

    pub fn from_index(i: u8) -> Self {
        Self {
            rotations: i % 4,
            flip: (i / 4) % 2 == 1,
        }
    }

    pub fn index(&self) -> u8 {
        self.rotations + if self.flip { 4 } else { 0 }
    }

    pub fn apply<T: Clone>(&self, grid: ArrayView2<T>) -> Array2<T> {
        let mut view = grid;
        if self.flip {
            view.invert_axis(ndarray::Axis(1));
        }
        for _ in 0..self.rotations {
            // counter-clockwise quarter turn: transpose then flip rows
            view = view.reversed_axes();
            view.invert_axis(ndarray::Axis(0));
        }
        view.to_owned()
    }
}

impl AnnotatedPatch {
    pub fn transformed(&self, t: Dihedral) -> Self {
        Self {
            patch: self.patch.map_grids(|g| t.apply(g)),
            annotation: match &self.annotation {
                Annotation::Labeled(m) => Annotation::Labeled(InstanceLabelMap(t.apply(m.view()))),
                Annotation::Unlabeled => Annotation::Unlabeled,
            },
        }
    }
}

/// The 8 rotated and flipped variants of a square patch, identity first.
pub fn augment_8fold(patch: &AnnotatedPatch) -> Result<Vec<AnnotatedPatch>> {
    let (rows, cols) = patch.patch.dim();
    ensure!(
        rows == cols,
        Input,
        "augmentation needs a square patch, got {rows}x{cols}"
    );
    Ok(Dihedral::all().iter().map(|&t| patch.transformed(t)).collect())
}
