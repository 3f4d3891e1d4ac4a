//! Axis-aligned boxes in continuous corner coordinates.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box `[x_min, x_max) × [y_min, y_max)` with strictly positive
/// area and finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|c| c.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid("box must have positive area"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Square box of side `side` centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Result<Self> {
        let half = side / 2.0;
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Total on valid boxes: the union always has
    /// positive area.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.corners()
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

/// A candidate box with its class label and confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::param("score", format!("{score} not in [0, 1]")));
        }
        Ok(Self { bbox, class_id, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts unit cells covered by integer boxes; independent of the
    /// closed-form intersection arithmetic.
    fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let lo_x = a[0].min(b[0]);
        let lo_y = a[1].min(b[1]);
        let hi_x = a[2].max(b[2]);
        let hi_y = a[3].max(b[3]);
        let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0u64, 0u64);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
        let expected = raster_iou([0, 0, 2, 2], [1, 1, 3, 3]);
        assert!((expected - 1.0 / 7.0).abs() < 1e-15);
        assert!((iou(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)) - expected).abs() < 1e-12);
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0., 0., 1., 1.)), 1.0);
        assert_eq!(area(&bx(0., 0., 2., 3.)), 6.0);
        assert_eq!(area(&bx(1.5, 1.5, 2.5, 4.0)), 2.5);
    }

    #[test]
    fn rejects_degenerate_and_nonfinite_boxes() {
        assert!(BoundingBox::new(0., 0., 0., 1.).is_err());
        assert!(BoundingBox::new(0., 2., 1., 1.).is_err());
        assert!(BoundingBox::new(f64::NAN, 0., 1., 1.).is_err());
        assert!(BoundingBox::new(0., 0., f64::INFINITY, 1.).is_err());
    }

    #[test]
    fn rejects_out_of_range_scores() {
        let b = bx(0., 0., 1., 1.);
        assert!(Detection::new(b, 0, 1.01).is_err());
        assert!(Detection::new(b, 0, -0.1).is_err());
        assert!(Detection::new(b, 0, 1.0).is_ok());
    }

    #[test]
    fn corner_array_conversion() {
        let b = bx(1., 2., 3., 4.);
        assert_eq!(<[f64; 4]>::from(b), [1., 2., 3., 4.]);
        assert!(BoundingBox::try_from([3., 0., 1., 1.]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.01..40.0f64, 0.01..40.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    fn arb_int_box() -> impl Strategy<Value = [i32; 4]> {
        (0..20i32, 0..20i32, 1..12i32, 1..12i32).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(a.iou(&b), b.iou(&a));
        }

        #[test]
        fn self_iou_is_one(a in arb_box()) {
            prop_assert_eq!(a.iou(&a), 1.0);
        }

        #[test]
        fn iou_bounded_by_area_ratio(a in arb_box(), b in arb_box()) {
            let v = a.iou(&b);
            let ratio = a.area().min(b.area()) / a.area().max(b.area());
            prop_assert!(v >= 0.0);
            prop_assert!(v <= ratio + 1e-12);
        }

        #[test]
        fn iou_matches_cell_counting(a in arb_int_box(), b in arb_int_box()) {
            let fa = bx(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
            let fb = bx(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
            prop_assert!((fa.iou(&fb) - raster_iou(a, b)).abs() < 1e-9);
        }
    }
}
