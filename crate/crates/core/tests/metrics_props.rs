mod common;

use common::{oracle_ap, oracle_seg, perturbed, random_map, rectangle_maps, shuffled_ids};
use denoiseg::dataio::{Dihedral, InstanceLabelMap};
use denoiseg::metrics::{average_precision, psnr, seg_score};
use denoiseg::seed::rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn greedy_matching_equals_exhaustive_on_small_grids() {
    let maps = rectangle_maps(3);
    for gt in &maps {
        for pred in &maps {
            assert_eq!(
                average_precision(pred, gt).unwrap(),
                oracle_ap(pred, gt),
                "{pred:?} vs {gt:?}"
            );
            match oracle_seg(pred, gt) {
                Some(s) => assert!((seg_score(pred, gt).unwrap() - s).abs() < 1e-12),
                None => assert!(seg_score(pred, gt).is_err()),
            }
        }
    }
}

#[test]
fn random_maps_agree_with_oracle() {
    let mut r = rng(11);
    for _ in 0..300 {
        let gt = random_map(&mut r, 16, 5);
        let pred = if r.random_bool(0.7) {
            perturbed(&mut r, &gt)
        } else {
            random_map(&mut r, 16, 5)
        };
        assert!((average_precision(&pred, &gt).unwrap() - oracle_ap(&pred, &gt)).abs() < 1e-12);
        if let Some(s) = oracle_seg(&pred, &gt) {
            assert!((seg_score(&pred, &gt).unwrap() - s).abs() < 1e-12);
        }
    }
}

fn map_strategy() -> impl Strategy<Value = (InstanceLabelMap, InstanceLabelMap, u64)> {
    any::<u64>().prop_map(|seed| {
        let mut r = rng(seed);
        let gt = random_map(&mut r, 16, 6);
        let pred = perturbed(&mut r, &gt);
        (gt, pred, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_ignore_instance_numbering((gt, pred, seed) in map_strategy()) {
        let mut r = rng(seed ^ 0x5eed);
        let gt2 = shuffled_ids(&mut r, &gt);
        let pred2 = shuffled_ids(&mut r, &pred);
        prop_assert_eq!(average_precision(&pred, &gt).unwrap(), average_precision(&pred2, &gt2).unwrap());
        if gt.instance_count() > 0 {
            prop_assert!((seg_score(&pred, &gt).unwrap() - seg_score(&pred2, &gt2).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_ignore_joint_rotation_and_flip((gt, pred, _seed) in map_strategy(), t in 0u8..8) {
        let t = Dihedral::from_index(t);
        let gt2 = InstanceLabelMap(t.apply(gt.view()));
        let pred2 = InstanceLabelMap(t.apply(pred.view()));
        prop_assert_eq!(average_precision(&pred, &gt).unwrap(), average_precision(&pred2, &gt2).unwrap());
        if gt.instance_count() > 0 {
            prop_assert!((seg_score(&pred, &gt).unwrap() - seg_score(&pred2, &gt2).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_lie_in_unit_interval((gt, pred, _seed) in map_strategy()) {
        let ap = average_precision(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        if gt.instance_count() > 0 {
            let s = seg_score(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn psnr_ignores_a_common_offset(seed in any::<u64>(), offset in -100.0f32..100.0) {
        let mut r = rng(seed);
        let clean = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0f32..1.0));
        let noisy = clean.mapv(|v| v + 0.05);
        let a = psnr(noisy.view(), clean.view()).unwrap();
        let b = psnr(noisy.mapv(|v| v + offset).view(), clean.mapv(|v| v + offset).view()).unwrap();
        prop_assert!((a - b).abs() < 0.05, "{} vs {}", a, b);
    }
}

#[test]
fn shape_mismatch_is_an_input_error() {
    let a = InstanceLabelMap::zeros((4, 4));
    let b = InstanceLabelMap::zeros((4, 5));
    assert!(matches!(average_precision(&a, &b), Err(denoiseg::Error::Input(_))));
    assert!(matches!(seg_score(&a, &b), Err(denoiseg::Error::Input(_))));
}
