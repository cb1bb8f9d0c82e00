//! Reference implementations and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use denoiseg::dataio::{
    extract_patches, generate_blobs, select_labeled_subset, split_train_val, AnnotatedPatch, DatasetSplit,
    InstanceLabelMap,
};
use ndarray::Array2;
use rand::Rng;

pub type PixelSet = BTreeSet<(usize, usize)>;

/// Pixel sets of every instance, ordered by id.
pub fn instance_sets(map: &InstanceLabelMap) -> Vec<PixelSet> {
    let mut out: BTreeMap<u32, PixelSet> = BTreeMap::new();
    for ((y, x), &v) in map.0.indexed_iter() {
        if v != 0 {
            out.entry(v).or_default().insert((y, x));
        }
    }
    out.into_values().collect()
}

fn iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Largest number of one-to-one pairs with IoU > 0.5, by trying every
/// partial assignment of ground-truth objects to predictions.
fn best_matching(gt: &[PixelSet], pred: &[PixelSet]) -> usize {
    fn go(g: usize, gt: &[PixelSet], pred: &[PixelSet], used: &mut Vec<bool>) -> usize {
        if g == gt.len() {
            return 0;
        }
        let mut best = go(g + 1, gt, pred, used);
        for p in 0..pred.len() {
            if !used[p] && iou(&gt[g], &pred[p]) > 0.5 {
                used[p] = true;
                best = best.max(1 + go(g + 1, gt, pred, used));
                used[p] = false;
            }
        }
        best
    }
    go(0, gt, pred, &mut vec![false; pred.len()])
}

pub fn oracle_ap_sets(pred: &[PixelSet], gt: &[PixelSet]) -> f64 {
    if gt.is_empty() && pred.is_empty() {
        return 1.0;
    }
    let tp = best_matching(gt, pred);
    tp as f64 / (gt.len() + pred.len() - tp) as f64
}

/// `None` when the ground truth has no objects.
pub fn oracle_seg_sets(pred: &[PixelSet], gt: &[PixelSet]) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for obj in gt {
        for cand in pred {
            if 2 * obj.intersection(cand).count() > obj.len() {
                total += iou(obj, cand);
            }
        }
    }
    Some(total / gt.len() as f64)
}

pub fn oracle_ap(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> f64 {
    oracle_ap_sets(&instance_sets(pred), &instance_sets(gt))
}

pub fn oracle_seg(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Option<f64> {
    oracle_seg_sets(&instance_sets(pred), &instance_sets(gt))
}

/// Every axis-aligned rectangle inside a `side` x `side` grid.
fn rectangles(side: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in 0..side {
        for y1 in y0 + 1..=side {
            for x0 in 0..side {
                for x1 in x0 + 1..=side {
                    out.push((y0, y1, x0, x1));
                }
            }
        }
    }
    out
}

/// All maps on a `side` x `side` grid with at most two disjoint
/// rectangular instances, ids in raster order.
pub fn rectangle_maps(side: usize) -> Vec<InstanceLabelMap> {
    let rects = rectangles(side);
    let paint = |map: &mut Array2<u32>, (y0, y1, x0, x1): (usize, usize, usize, usize), id: u32| {
        for y in y0..y1 {
            for x in x0..x1 {
                map[[y, x]] = id;
            }
        }
    };
    let mut out = vec![InstanceLabelMap::zeros((side, side))];
    for (i, &a) in rects.iter().enumerate() {
        let mut one = Array2::zeros((side, side));
        paint(&mut one, a, 1);
        out.push(InstanceLabelMap(one.clone()));
        for &b in &rects[i + 1..] {
            let disjoint = a.1 <= b.0 || b.1 <= a.0 || a.3 <= b.2 || b.3 <= a.2;
            if disjoint {
                let mut two = one.clone();
                paint(&mut two, b, 2);
                out.push(InstanceLabelMap(two).relabeled());
            }
        }
    }
    out
}

/// Up to `max_objects` random rectangles; later ones overwrite earlier ones.
pub fn random_map(rng: &mut impl Rng, side: usize, max_objects: u32) -> InstanceLabelMap {
    let mut map = Array2::zeros((side, side));
    for id in 1..=rng.random_range(0..=max_objects) {
        let h = rng.random_range(1..=side / 2);
        let w = rng.random_range(1..=side / 2);
        let y = rng.random_range(0..=side - h);
        let x = rng.random_range(0..=side - w);
        for yy in y..y + h {
            for xx in x..x + w {
                map[[yy, xx]] = id;
            }
        }
    }
    InstanceLabelMap(map).relabeled()
}

/// A prediction resembling `gt`: each object shifted by up to one pixel
/// and a random pixel-level dropout.
pub fn perturbed(rng: &mut impl Rng, gt: &InstanceLabelMap) -> InstanceLabelMap {
    let (rows, cols) = gt.dim();
    let dy = rng.random_range(-1i64..=1) as isize;
    let dx = rng.random_range(-1i64..=1) as isize;
    let drop = rng.random_range(0.0..0.3);
    let out = Array2::from_shape_fn((rows, cols), |(y, x)| {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= rows as isize || sx >= cols as isize || rng.random::<f64>() < drop {
            0
        } else {
            gt.0[[sy as usize, sx as usize]]
        }
    });
    InstanceLabelMap(out)
}

/// Permutes nonzero ids with a random bijection onto fresh ids.
pub fn shuffled_ids(rng: &mut impl Rng, map: &InstanceLabelMap) -> InstanceLabelMap {
    let ids = map.instance_ids();
    let mut targets: Vec<u32> = (1..=ids.len() as u32).map(|v| v * 7 + 3).collect();
    for i in (1..targets.len()).rev() {
        targets.swap(i, rng.random_range(0..=i));
    }
    let lookup: BTreeMap<u32, u32> = ids.into_iter().zip(targets).collect();
    InstanceLabelMap(map.0.mapv(|v| if v == 0 { 0 } else { lookup[&v] }))
}

/// Blob patches split 85/15 with `labeled` annotated training patches.
pub fn blob_split(images: usize, side: usize, labeled: usize, seed: u64) -> DatasetSplit {
    let mut patches: Vec<AnnotatedPatch> = Vec::new();
    for (image, labels) in generate_blobs(images, side, (1, 3), seed).unwrap() {
        patches.extend(extract_patches(&image, Some(&labels), side).unwrap());
    }
    let mut split = split_train_val(patches, 0.85, seed + 1).unwrap();
    split.train = select_labeled_subset(split.train, labeled, seed + 2).unwrap();
    split
}

/// Random network outputs `[m, 4, side, side]` and targets where roughly
/// half of the elements are labeled.
pub fn random_loss_batch(
    rng: &mut impl Rng,
    m: usize,
    side: usize,
) -> (ndarray::Array4<f64>, Vec<denoiseg::losses::LossTarget>) {
    use denoiseg::blindspot::sample_blind_spots;
    use denoiseg::labelgen::{instances_to_three_class, ThreeClassMap};

    let outputs = ndarray::Array4::from_shape_fn((m, 4, side, side), |_| rng.random_range(-3.0..3.0));
    let targets = (0..m)
        .map(|_| {
            let patch = Array2::from_shape_fn((side, side), |_| rng.random_range(-1.0f32..1.0));
            let spots = sample_blind_spots(patch.view(), 0.05, rng.random()).unwrap();
            let target = if rng.random_bool(0.5) {
                instances_to_three_class(&random_map(rng, side, 3))
            } else {
                ThreeClassMap::unlabeled((side, side))
            };
            denoiseg::losses::LossTarget { spots, target }
        })
        .collect();
    (outputs, targets)
}
