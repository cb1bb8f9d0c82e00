//! Blind-spot masking for self-supervised denoising.
//!
//! A small random set of pixels is hidden from the network by overwriting
//! each with a randomly chosen neighbour. The network is then scored only
//! at those pixels, against their original values, so it cannot learn the
//! identity and must infer each pixel from its surroundings.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use num_traits::Float;
use rand::seq::index;
use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::seed::rng;

/// Fraction of pixels masked per patch.
pub const DEFAULT_FRACTION: f64 = 0.004;
/// Replacement values are drawn from a window of this radius (5x5).
pub const NEIGHBORHOOD_RADIUS: isize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotSet {
    /// (row, col), pairwise distinct.
    pub coords: Vec<(usize, usize)>,
    pub original_values: Vec<f32>,
    pub replacement_values: Vec<f32>,
}

impl BlindSpotSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn check_bounds(&self, dim: (usize, usize)) -> Result<()> {
        ensure!(
            self.coords.len() == self.original_values.len() && self.coords.len() == self.replacement_values.len(),
            Contract,
            "blind-spot lists have unequal lengths"
        );
        for &(y, x) in &self.coords {
            ensure!(
                y < dim.0 && x < dim.1,
                Contract,
                "blind spot ({y}, {x}) outside {}x{} patch",
                dim.0,
                dim.1
            );
        }
        Ok(())
    }
}

/// Number of spots selected for a `rows x cols` patch.
pub fn spot_count(rows: usize, cols: usize, fraction: f64) -> usize {
    (fraction * (rows * cols) as f64).ceil() as usize
}

/// Picks `ceil(fraction * H * W)` distinct pixels uniformly and, for each, a
/// uniformly chosen in-bounds neighbour from the 5x5 window around it
/// (center excluded) whose value becomes the replacement.
pub fn sample_blind_spots(patch: ArrayView2<f32>, fraction: f64, seed: u64) -> Result<BlindSpotSet> {
    ensure!(
        fraction > 0.0 && fraction < 1.0,
        Config,
        "blind-spot fraction must lie in (0, 1), got {fraction}"
    );
    let (rows, cols) = patch.dim();
    let count = spot_count(rows, cols, fraction);
    ensure!(count > 0, Config, "fraction {fraction} selects no pixels");
    ensure!(
        rows * cols > 1,
        Input,
        "a 1x1 patch has no neighbours to draw replacements from"
    );
    let mut rng = rng(seed);
    let picks = index::sample(&mut rng, rows * cols, count);
    let mut set = BlindSpotSet {
        coords: Vec::with_capacity(count),
        original_values: Vec::with_capacity(count),
        replacement_values: Vec::with_capacity(count),
    };
    let mut window: Vec<(usize, usize)> = Vec::with_capacity(24);
    for flat in picks {
        let (y, x) = (flat / cols, flat % cols);
        window.clear();
        for dy in -NEIGHBORHOOD_RADIUS..=NEIGHBORHOOD_RADIUS {
            for dx in -NEIGHBORHOOD_RADIUS..=NEIGHBORHOOD_RADIUS {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if (dy, dx) != (0, 0) && ny >= 0 && nx >= 0 && (ny as usize) < rows && (nx as usize) < cols {
                    window.push((ny as usize, nx as usize));
                }
            }
        }
        let source = window[rng.random_range(0..window.len())];
        set.coords.push((y, x));
        set.original_values.push(patch[[y, x]]);
        set.replacement_values.push(patch[source]);
    }
    Ok(set)
}

/// Copy of `patch` with every spot overwritten by its replacement value.
pub fn apply_mask(patch: ArrayView2<f32>, spots: &BlindSpotSet) -> Result<Array2<f32>> {
    let mut out = patch.to_owned();
    apply_mask_in_place(out.view_mut(), spots)?;
    Ok(out)
}

pub fn apply_mask_in_place(mut patch: ArrayViewMut2<f32>, spots: &BlindSpotSet) -> Result<()> {
    spots.check_bounds(patch.dim())?;
    for (&c, &v) in spots.coords.iter().zip(&spots.replacement_values) {
        patch[c] = v;
    }
    Ok(())
}

/// Mean squared error between the prediction and the ORIGINAL (pre-mask)
/// values, over the spot pixels only.
pub fn masked_mse<T: Float>(denoised: ArrayView2<T>, spots: &BlindSpotSet) -> Result<f64> {
    ensure!(!spots.is_empty(), Contract, "masked MSE over an empty spot set");
    spots.check_bounds(denoised.dim())?;
    let sum: f64 = spots
        .coords
        .iter()
        .zip(&spots.original_values)
        .map(|(&c, &orig)| {
            let d = denoised[c].to_f64().unwrap_or(f64::NAN) - orig as f64;
            d * d
        })
        .sum();
    Ok(sum / spots.len() as f64)
}

/// Adds `scale * d(masked_mse)/d(denoised)` into `grad`.
pub fn masked_mse_grad<T: Float>(
    denoised: ArrayView2<T>,
    spots: &BlindSpotSet,
    scale: T,
    mut grad: ArrayViewMut2<T>,
) -> Result<()> {
    ensure!(!spots.is_empty(), Contract, "masked MSE over an empty spot set");
    spots.check_bounds(denoised.dim())?;
    let n = T::from(spots.len()).unwrap();
    let two = T::one() + T::one();
    for (&c, &orig) in spots.coords.iter().zip(&spots.original_values) {
        grad[c] = grad[c] + scale * two * (denoised[c] - T::from(orig).unwrap()) / n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn ramp(rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(y, x)| (y * cols + x) as f32)
    }

    #[test]
    fn spot_count_for_default_patch() {
        let patch = ramp(128, 128);
        let spots = sample_blind_spots(patch.view(), DEFAULT_FRACTION, 1).unwrap();
        assert_eq!(spots.len(), 66);
    }

    #[test]
    fn spots_are_distinct_in_bounds_and_use_neighbours() {
        let patch = ramp(20, 13);
        for seed in 0..20 {
            let spots = sample_blind_spots(patch.view(), 0.1, seed).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (i, &(y, x)) in spots.coords.iter().enumerate() {
                assert!(y < 20 && x < 13);
                assert!(seen.insert((y, x)));
                assert_eq!(spots.original_values[i], patch[[y, x]]);
                // ramp values are unique, so the value pins the source pixel
                let src = spots.replacement_values[i] as usize;
                let (sy, sx) = (src / 13, src % 13);
                let cheb = (sy as isize - y as isize).abs().max((sx as isize - x as isize).abs());
                assert!(cheb >= 1 && cheb <= 2, "source at distance {cheb}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let patch = ramp(32, 32);
        assert_eq!(
            sample_blind_spots(patch.view(), 0.01, 5).unwrap(),
            sample_blind_spots(patch.view(), 0.01, 5).unwrap()
        );
    }

    #[test]
    fn invalid_fraction() {
        let patch = ramp(8, 8);
        for f in [0.0, 1.0, -0.1] {
            assert!(matches!(sample_blind_spots(patch.view(), f, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn masking_changes_only_spots() {
        let patch = Array2::from_elem((6, 6), 0.5f32);
        let spots = BlindSpotSet {
            coords: vec![(3, 3)],
            original_values: vec![0.5],
            replacement_values: vec![0.9],
        };
        let out = apply_mask(patch.view(), &spots).unwrap();
        for ((y, x), &v) in out.indexed_iter() {
            if (y, x) == (3, 3) {
                assert_eq!(v - 0.5, 0.9f32 - 0.5);
            } else {
                assert_eq!(v, 0.5);
            }
        }
        let same = BlindSpotSet {
            replacement_values: vec![0.5],
            ..spots.clone()
        };
        assert_eq!(apply_mask(patch.view(), &same).unwrap(), patch);
        let outside = BlindSpotSet {
            coords: vec![(6, 0)],
            ..spots
        };
        assert!(matches!(apply_mask(patch.view(), &outside), Err(Error::Contract(_))));
    }

    #[test]
    fn masking_touches_at_most_spot_count_pixels() {
        let patch = ramp(128, 128);
        let spots = sample_blind_spots(patch.view(), DEFAULT_FRACTION, 3).unwrap();
        let out = apply_mask(patch.view(), &spots).unwrap();
        let changed = out.iter().zip(patch.iter()).filter(|(a, b)| a != b).count();
        assert!(changed <= 66 && changed > 0);
    }

    #[test]
    fn mse_values() {
        let spots = BlindSpotSet {
            coords: vec![(0, 0), (1, 1), (2, 2)],
            original_values: vec![1.0, 2.0, 3.0],
            replacement_values: vec![0.0; 3],
        };
        let mut pred = Array2::<f64>::zeros((3, 3));
        pred[[0, 0]] = 1.0;
        pred[[1, 1]] = 2.0;
        pred[[2, 2]] = 3.0;
        assert_eq!(masked_mse(pred.view(), &spots).unwrap(), 0.0);

        let single = BlindSpotSet {
            coords: vec![(1, 1)],
            original_values: vec![2.0],
            replacement_values: vec![0.0],
        };
        pred[[1, 1]] = 2.5;
        assert!((masked_mse(pred.view(), &single).unwrap() - 0.25).abs() < 1e-12);

        pred[[0, 0]] = 1.1;
        pred[[1, 1]] = 2.2;
        pred[[2, 2]] = 3.4;
        assert!((masked_mse(pred.view(), &spots).unwrap() - 0.07).abs() < 1e-12);

        let empty = BlindSpotSet {
            coords: vec![],
            original_values: vec![],
            replacement_values: vec![],
        };
        assert!(matches!(masked_mse(pred.view(), &empty), Err(Error::Contract(_))));
    }
}
