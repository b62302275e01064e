//! Precision/recall evaluation with continuous-interpolation AP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BoxPx, Detection};

/// Area limits of the size buckets, `[lo, hi)` in square pixels.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64)>,
    pub ap: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Matches each image's detections in descending score order: a detection
/// takes the ground truth it overlaps most; it is a true positive when that
/// overlap reaches `iou_threshold` and the box is still unclaimed.
///
/// Ground truths whose area falls outside `area` are ignored, as are
/// detections matching them and unmatched detections outside the range.
fn match_image(dets: &[Detection], gts: &[BoxPx], iou_threshold: f64, area: (f64, f64)) -> Vec<Outcome> {
    let in_range = |b: &BoxPx| b.area() >= area.0 && b.area() < area.1;
    let mut claimed = vec![false; gts.len()];
    let mut out = vec![Outcome::Fp; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            let v = iou(&dets[i].bbox, gt);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        out[i] = match best {
            Some((j, v)) if v >= iou_threshold => {
                if !in_range(&gts[j]) {
                    Outcome::Ignored
                } else if claimed[j] {
                    Outcome::Fp
                } else {
                    claimed[j] = true;
                    Outcome::Tp
                }
            }
            _ if !in_range(&dets[i].bbox) => Outcome::Ignored,
            _ => Outcome::Fp,
        };
    }
    out
}

fn curve_for(dets: &[Vec<Detection>], gts: &[Vec<BoxPx>], iou_threshold: f64, area: (f64, f64)) -> (Vec<(f64, f64)>, usize) {
    let num_gt = gts.iter().flatten().filter(|b| b.area() >= area.0 && b.area() < area.1).count();
    let mut ranked: Vec<(f64, Outcome)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        for (det, o) in d.iter().zip(match_image(d, g, iou_threshold, area)) {
            if o != Outcome::Ignored {
                ranked.push((det.score, o));
            }
        }
    }
    // stable: equal scores keep image order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (_, o) in ranked {
        match o {
            Outcome::Tp => tp += 1,
            _ => fp += 1,
        }
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    (curve, num_gt)
}

/// Area under the monotone precision envelope of a `(recall, precision)`
/// curve, integrated over every recall change.
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for &(r, p) in curve {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..rec.len() - 1 {
        if rec[i + 1] != rec[i] {
            ap += (rec[i + 1] - rec[i]) * prec[i + 1];
        }
    }
    ap
}

/// Evaluates per-image detections against per-image ground truth.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BoxPx>], iou_threshold: f64) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::contract(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::config(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    let all = (0.0, f64::INFINITY);
    let (curve, num_gt) = curve_for(dets, gts, iou_threshold, all);
    let bucket = |lo, hi| average_precision(&curve_for(dets, gts, iou_threshold, (lo, hi)).0);
    Ok(EvalReport {
        ap: average_precision(&curve),
        ap_small: bucket(0.0, SMALL_MAX_AREA),
        ap_medium: bucket(SMALL_MAX_AREA, MEDIUM_MAX_AREA),
        ap_large: bucket(MEDIUM_MAX_AREA, f64::INFINITY),
        curve,
        num_gt,
        num_det: dets.iter().map(Vec::len).sum(),
    })
}
