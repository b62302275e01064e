//! Axis-aligned boxes in pixel coordinates.
//!
//! Boxes are continuous half-open regions: area is `width · height` with no
//! `+1` pixel convention, which keeps IoU exactly invariant under scaling.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxPx {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

impl BoxPx {
    pub const fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Self {
        BoxPx { x_min, y_min, width, height }
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        BoxPx { x_min: cx - width / 2.0, y_min: cy - height / 2.0, width, height }
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Geometric-mean side `√(w·h)`.
    pub fn size(&self) -> f64 {
        libm_sqrt(self.area())
    }

    pub fn is_valid(&self) -> bool {
        self.width >= 0.0 && self.height >= 0.0 && self.x_min.is_finite() && self.y_min.is_finite()
    }

    pub fn intersection(&self, other: &BoxPx) -> f64 {
        let w = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let h = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `[0, width) × [0, height)`; `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoxPx> {
        let x0 = self.x_min.max(0.0);
        let y0 = self.y_min.max(0.0);
        let x1 = self.x_max().min(width);
        let y1 = self.y_max().min(height);
        (x1 > x0 && y1 > y0).then(|| BoxPx::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoxPx {
        BoxPx { x_min: self.x_min + dx, y_min: self.y_min + dy, ..*self }
    }
}

fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Scales a box about the image origin: all four coordinates are multiplied
/// by `factor`.
pub fn scale_box(b: &BoxPx, factor: f64) -> Result<BoxPx> {
    if !(factor > 0.0) {
        return Err(Error::contract(alloc::format!("scale factor must be positive, got {factor}")));
    }
    Ok(BoxPx::new(b.x_min * factor, b.y_min * factor, b.width * factor, b.height * factor))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxPx,
    pub score: f64,
    /// Always 0 (face).
    pub class_id: u32,
}

impl Detection {
    pub fn face(bbox: BoxPx, score: f64) -> Self {
        Detection { bbox, score, class_id: 0 }
    }
}

/// Order of detections by descending score; earlier index first on ties.
pub(crate) fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. A detection is dropped when its IoU with
/// an already-kept detection exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let order = score_order(dets);
    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed = alloc::vec![false; dets.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BoxPx::new(3.0, 4.0, 10.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoxPx::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        let z = BoxPx::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let a = BoxPx::new(0.0, 0.0, 10.0, 10.0);
        let b = BoxPx::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &b), 25.0 / 175.0);
    }

    #[test]
    fn scale_box_examples() {
        let b = BoxPx::new(0.0, 0.0, 256.0, 256.0);
        assert_eq!(scale_box(&b, 1.0).unwrap(), b);
        assert_eq!(scale_box(&b, 0.5).unwrap(), BoxPx::new(0.0, 0.0, 128.0, 128.0));
        assert!(scale_box(&b, 0.0).is_err());
        assert!(scale_box(&b, -2.0).is_err());
    }

    #[test]
    fn nms_small_cases() {
        let d = Detection::face(BoxPx::new(0.0, 0.0, 10.0, 10.0), 0.5);
        assert_eq!(nms(&[d], 0.5), alloc::vec![d]);
        let hi = Detection::face(d.bbox, 0.9);
        let lo = Detection::face(d.bbox, 0.8);
        assert_eq!(nms(&[lo, hi], 0.5), alloc::vec![hi]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn clip_to_image() {
        let b = BoxPx::new(-5.0, 10.0, 20.0, 100.0);
        assert_eq!(b.clip(50.0, 60.0), Some(BoxPx::new(0.0, 10.0, 15.0, 50.0)));
        assert_eq!(BoxPx::new(60.0, 0.0, 5.0, 5.0).clip(50.0, 50.0), None);
    }

    fn arb_box() -> impl Strategy<Value = BoxPx> {
        (-50.0..200.0f64, -50.0..200.0f64, 0.0..120.0f64, 0.0..120.0f64)
            .prop_map(|(x, y, w, h)| BoxPx::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_is_scale_invariant(a in arb_box(), b in arb_box(), s in 0.05..20.0f64) {
            let direct = iou(&a, &b);
            let scaled = iou(&scale_box(&a, s).unwrap(), &scale_box(&b, s).unwrap());
            prop_assert!((direct - scaled).abs() < 1e-12);
        }

        #[test]
        fn nms_keeps_a_non_overlapping_subset(
            raw in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..40),
            thr in 0.1..0.9f64,
        ) {
            let dets: Vec<Detection> = raw.iter().map(|&(b, s)| Detection::face(b, s)).collect();
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    prop_assert!(a.score >= b.score);
                }
            }
        }
    }
}
