//! Instance maps to background / foreground / border targets.

use ndarray::{Array2, Array3, ArrayView2};

use crate::dataio::{Annotation, InstanceLabelMap};
use crate::error::{ensure, Result};

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
pub const BORDER: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Per-pixel class map. When `is_unlabeled` is set the grid carries no
/// information and consumers must ignore it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreeClassMap {
    pub classes: Array2<u8>,
    pub is_unlabeled: bool,
}

impl ThreeClassMap {
    pub fn unlabeled(dim: (usize, usize)) -> Self {
        Self {
            classes: Array2::zeros(dim),
            is_unlabeled: true,
        }
    }

    pub fn from_annotation(annotation: &Annotation, dim: (usize, usize)) -> Self {
        match annotation {
            Annotation::Labeled(labels) => instances_to_three_class(labels),
            Annotation::Unlabeled => Self::unlabeled(dim),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.classes.dim()
    }
}

/// An instance pixel is border when any of its 8 neighbours lies outside
/// the image or carries a different id; otherwise it is foreground.
pub fn instances_to_three_class(mask: &InstanceLabelMap) -> ThreeClassMap {
    ThreeClassMap {
        classes: classify(mask.view()),
        is_unlabeled: false,
    }
}

fn classify(mask: ArrayView2<u32>) -> Array2<u8> {
    let (rows, cols) = mask.dim();
    Array2::from_shape_fn((rows, cols), |(y, x)| {
        let id = mask[[y, x]];
        if id == 0 {
            return BACKGROUND;
        }
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= rows as isize || nx >= cols as isize {
                    return BORDER;
                }
                if mask[[ny as usize, nx as usize]] != id {
                    return BORDER;
                }
            }
        }
        FOREGROUND
    })
}

/// Indicator encoding with shape `[3, rows, cols]`.
pub fn three_class_to_onehot(map: &ThreeClassMap) -> Result<Array3<f32>> {
    ensure!(
        !map.is_unlabeled,
        Contract,
        "cannot one-hot encode an unlabeled class map"
    );
    let (rows, cols) = map.dim();
    Ok(Array3::from_shape_fn((NUM_CLASSES, rows, cols), |(c, y, x)| {
        if map.classes[[y, x]] as usize == c {
            1.0
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::{array, s};

    #[test]
    fn empty_mask_is_background() {
        let map = instances_to_three_class(&InstanceLabelMap::zeros((6, 4)));
        assert!(map.classes.iter().all(|&c| c == BACKGROUND));
    }

    #[test]
    fn solid_square_has_ring_border() {
        let mut mask = Array2::zeros((5, 5));
        mask.slice_mut(s![1..4, 1..4]).fill(1);
        let map = instances_to_three_class(&InstanceLabelMap(mask));
        let expected = array![
            [0, 0, 0, 0, 0],
            [0, 2, 2, 2, 0],
            [0, 2, 1, 2, 0],
            [0, 2, 2, 2, 0],
            [0, 0, 0, 0, 0]
        ];
        assert_eq!(map.classes, expected);
    }

    #[test]
    fn touching_instances_share_border() {
        let mut mask = Array2::zeros((5, 8));
        mask.slice_mut(s![.., 0..4]).fill(1);
        mask.slice_mut(s![.., 4..8]).fill(2);
        let map = instances_to_three_class(&InstanceLabelMap(mask));
        for y in 0..5 {
            assert_eq!(map.classes[[y, 3]], BORDER);
            assert_eq!(map.classes[[y, 4]], BORDER);
        }
        // interior pixels away from the shared edge and the frame
        assert_eq!(map.classes[[2, 1]], FOREGROUND);
        assert_eq!(map.classes[[2, 6]], FOREGROUND);
    }

    #[test]
    fn single_pixel_instance_is_border() {
        let mut mask = Array2::zeros((3, 3));
        mask[[1, 1]] = 4;
        let map = instances_to_three_class(&InstanceLabelMap(mask));
        assert_eq!(map.classes[[1, 1]], BORDER);
    }

    #[test]
    fn onehot_encodings() {
        let bg = instances_to_three_class(&InstanceLabelMap::zeros((3, 3)));
        let hot = three_class_to_onehot(&bg).unwrap();
        assert!(hot.slice(s![0, .., ..]).iter().all(|&v| v == 1.0));

        let checker = ThreeClassMap {
            classes: Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8),
            is_unlabeled: false,
        };
        let hot = three_class_to_onehot(&checker).unwrap();
        for ((&a, &b), &c) in hot
            .slice(s![0, .., ..])
            .iter()
            .zip(hot.slice(s![1, .., ..]).iter())
            .zip(hot.slice(s![2, .., ..]).iter())
        {
            assert_eq!(a + b, 1.0);
            assert_eq!(c, 0.0);
        }

        let mut mask = Array2::zeros((5, 5));
        mask.slice_mut(s![1..4, 1..4]).fill(1);
        let ring = instances_to_three_class(&InstanceLabelMap(mask));
        let hot = three_class_to_onehot(&ring).unwrap();
        for ((y, x), &class) in ring.classes.indexed_iter() {
            for c in 0..3 {
                assert_eq!(hot[[c, y, x]], if c == class as usize { 1.0 } else { 0.0 });
            }
        }

        let err = three_class_to_onehot(&ThreeClassMap::unlabeled((2, 2)));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
