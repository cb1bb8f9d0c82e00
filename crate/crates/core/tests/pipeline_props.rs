use denoiseg::blindspot::{apply_mask, sample_blind_spots, spot_count};
use denoiseg::dataio::{
    augment_8fold, extract_patches, select_labeled_subset, split_train_val, AnnotatedPatch, Annotation, Dihedral,
    InstanceLabelMap, RawImage,
};
use denoiseg::postprocess::{foreground_probability, label_components, threshold_grid};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use std::collections::HashSet;

fn grid(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(y, x)| ((y * 131 + x * 17) as u64 ^ seed) as f32 % 97.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tiling_covers_the_anchored_region(rows in 4usize..40, cols in 4usize..40, size in 1usize..8, seed in any::<u64>()) {
        prop_assume!(rows >= size && cols >= size);
        let image = RawImage::new(grid(rows, cols, seed)).unwrap();
        let patches = extract_patches(&image, None, size).unwrap();
        prop_assert_eq!(patches.len(), (rows / size) * (cols / size));
        let per_row = cols / size;
        for (k, p) in patches.iter().enumerate() {
            let (ty, tx) = ((k / per_row) * size, (k % per_row) * size);
            for ((y, x), &v) in p.patch.pixels().indexed_iter() {
                prop_assert_eq!(v, image.pixels()[[ty + y, tx + x]]);
            }
        }
    }

    #[test]
    fn subset_selection_only_drops_annotations(n in 1usize..30, seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let patches: Vec<AnnotatedPatch> = (0..n)
            .map(|i| AnnotatedPatch {
                patch: RawImage::new(Array2::from_elem((3, 3), i as f32)).unwrap(),
                annotation: Annotation::Labeled(InstanceLabelMap(Array2::from_elem((3, 3), i as u32 + 1))),
            })
            .collect();
        let keep = (frac * n as f64).floor() as usize;
        let out = select_labeled_subset(patches.clone(), keep, seed).unwrap();
        prop_assert_eq!(out.iter().filter(|p| p.annotation.is_labeled()).count(), keep);
        for (a, b) in patches.iter().zip(&out) {
            prop_assert_eq!(&a.patch, &b.patch);
            if b.annotation.is_labeled() {
                prop_assert_eq!(&a.annotation, &b.annotation);
            }
        }
        prop_assert_eq!(out, select_labeled_subset(patches, keep, seed).unwrap());
    }

    #[test]
    fn split_is_a_partition(n in 2usize..40, seed in any::<u64>(), ratio in 0.1f64..0.9) {
        let patches: Vec<AnnotatedPatch> = (0..n)
            .map(|i| AnnotatedPatch {
                patch: RawImage::new(Array2::from_elem((2, 2), i as f32)).unwrap(),
                annotation: Annotation::Unlabeled,
            })
            .collect();
        let n_train = (ratio * n as f64 + 1e-9).floor() as usize;
        let result = split_train_val(patches, ratio, seed);
        if n_train == 0 || n_train == n {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let split = result.unwrap();
        prop_assert_eq!(split.train.len(), n_train);
        prop_assert_eq!(split.train.len() + split.val.len(), n);
        let ids: HashSet<u32> = split
            .train
            .iter()
            .chain(&split.val)
            .map(|p| p.patch.pixels()[[0, 0]] as u32)
            .collect();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn blind_spots_replace_from_the_neighbourhood(rows in 2usize..24, cols in 2usize..24, seed in any::<u64>()) {
        // every pixel value is unique so replacements can be located
        let patch = Array2::from_shape_fn((rows, cols), |(y, x)| (y * cols + x) as f32);
        let spots = sample_blind_spots(patch.view(), 0.004, seed).unwrap();
        prop_assert_eq!(spots.coords.len(), spot_count(rows, cols, 0.004));
        let distinct: HashSet<_> = spots.coords.iter().collect();
        prop_assert_eq!(distinct.len(), spots.coords.len());
        let masked = apply_mask(patch.view(), &spots).unwrap();
        for (k, &(y, x)) in spots.coords.iter().enumerate() {
            prop_assert_eq!(spots.original_values[k], patch[[y, x]]);
            let src = spots.replacement_values[k] as usize;
            let (sy, sx) = (src / cols, src % cols);
            prop_assert!((sy, sx) != (y, x));
            prop_assert!(sy.abs_diff(y) <= 2 && sx.abs_diff(x) <= 2);
            prop_assert_eq!(masked[[y, x]], spots.replacement_values[k]);
        }
        let untouched = masked.iter().zip(patch.iter()).filter(|(a, b)| a == b).count();
        prop_assert!(untouched >= rows * cols - spots.coords.len());
    }

    #[test]
    fn raising_the_threshold_never_grows_the_foreground(seed in any::<u64>()) {
        let scores = Array3::from_shape_fn((3, 12, 12), |(c, y, x)| {
            (((c * 7 + y * 13 + x * 5) as u64).wrapping_mul(seed | 1) % 1000) as f32 / 100.0 - 5.0
        });
        let prob = foreground_probability(scores.view()).unwrap();
        let mut previous = usize::MAX;
        for t in threshold_grid() {
            let mask = prob.mapv(|p| p as f64 > t);
            let labels = label_components(&mask);
            let size = labels.0.iter().filter(|&&v| v != 0).count();
            prop_assert!(size <= previous);
            prop_assert_eq!(size, mask.iter().filter(|&&m| m).count());
            let ids = labels.instance_ids();
            prop_assert_eq!(ids, (1..=labels.instance_count() as u32).collect::<Vec<_>>());
            previous = size;
        }
    }

    #[test]
    fn components_are_four_connected(bits in proptest::collection::vec(any::<bool>(), 100)) {
        let mask = Array2::from_shape_vec((10, 10), bits).unwrap();
        let labels = label_components(&mask).0;
        for y in 0..10 {
            for x in 0..10 {
                if x + 1 < 10 && mask[[y, x]] && mask[[y, x + 1]] {
                    prop_assert_eq!(labels[[y, x]], labels[[y, x + 1]]);
                }
                if y + 1 < 10 && mask[[y, x]] && mask[[y + 1, x]] {
                    prop_assert_eq!(labels[[y, x]], labels[[y + 1, x]]);
                }
            }
        }
        // diagonal neighbours alone do not join components
        let mut diag = Array2::from_elem((2, 2), false);
        diag[[0, 0]] = true;
        diag[[1, 1]] = true;
        prop_assert_eq!(label_components(&diag).instance_count(), 2);
    }
}

#[test]
fn augmentation_yields_the_eight_distinct_variants() {
    let patch = AnnotatedPatch {
        patch: RawImage::new(grid(5, 5, 1)).unwrap(),
        annotation: Annotation::Labeled(InstanceLabelMap(Array2::from_shape_fn((5, 5), |(y, x)| {
            (y * 5 + x) as u32
        }))),
    };
    let variants = augment_8fold(&patch).unwrap();
    assert_eq!(variants.len(), 8);
    assert_eq!(variants[0], patch);
    let distinct: HashSet<Vec<u32>> = variants
        .iter()
        .map(|v| v.annotation.labels().unwrap().0.iter().copied().collect())
        .collect();
    assert_eq!(distinct.len(), 8);
    for t in Dihedral::all() {
        assert_eq!(Dihedral::from_index(t.index()), t);
    }
}
