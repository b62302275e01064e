//! Slow, independent reference implementations used to cross-check the
//! production code in tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::anchors::{AnchorGrid, ContextTransformParams, PyramidAnchorConfig, PyramidLabelSet, Shift};
use crate::geometry::{iou, scale_box, BoxPx, Detection};
use crate::graph::smooth_l1;
use crate::network::HeadLayout;
use crate::tensor::Tensor;

/// IoU by counting cells of a `1/subdiv` pixel lattice whose centres fall
/// inside each box. Exact for boxes on the lattice.
pub fn raster_iou(a: &BoxPx, b: &BoxPx, subdiv: usize) -> f64 {
    let step = 1.0 / subdiv as f64;
    let lo_x = a.x_min.min(b.x_min).floor();
    let lo_y = a.y_min.min(b.y_min).floor();
    let hi_x = a.x_max().max(b.x_max()).ceil();
    let hi_y = a.y_max().max(b.y_max()).ceil();
    let nx = ((hi_x - lo_x) / step).round() as usize;
    let ny = ((hi_y - lo_y) / step).round() as usize;
    let inside = |bx: &BoxPx, x: f64, y: f64| x > bx.x_min && x < bx.x_max() && y > bx.y_min && y < bx.y_max();
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..ny {
        let y = lo_y + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = lo_x + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Suppression by repeated selection: take the best remaining detection
/// (earliest on ties), discard everything overlapping it, repeat.
pub fn exhaustive_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score {
                best = i;
            }
        }
        kept.push(dets[best]);
        alive.retain(|&i| i != best && iou(&dets[i].bbox, &dets[best].bbox) <= iou_threshold);
    }
    kept
}

/// Positive flags of level `k`, computed by enlarging the face instead of
/// shrinking the anchor. No best-anchor guarantee and no ignore rule.
pub fn scaled_face_positive(anchor: &BoxPx, face: &BoxPx, s_pa: f64, k: usize, threshold: f64) -> bool {
    let up = scale_box(face, s_pa.powi(k as i32)).expect("positive factor");
    iou(anchor, &up) > threshold
}

/// Coefficients of a linear form `c · (t_x, t_y, t_w, t_h)`.
pub type Form = [f64; 4];

fn shift_form(s: Shift, extent: usize) -> (Form, f64) {
    let mut f = [0.0; 4];
    match s {
        Shift::Fixed(c) => (f, c),
        Shift::TargetExtent(c) => {
            f[extent] = c;
            (f, 0.0)
        }
    }
}

/// The level-`k` context transform written out as four affine forms in
/// the base targets: `(coefficients, constant)` per output component.
pub fn symbolic_transform(k: usize, s_pa: f64, p: &ContextTransformParams) -> [(Form, f64); 4] {
    let s = s_pa.powi(k as i32);
    let (dx, cx) = shift_form(p.delta_x, 2);
    let (dy, cy) = shift_form(p.delta_y, 3);
    let h = (1.0 - s) / 2.0;
    let x = [1.0 + dx[0], dx[1], h * p.s_w + dx[2], dx[3]];
    let y = [dy[0], 1.0 + dy[1], dy[2], h * p.s_h + dy[3]];
    let w = [-2.0 * dx[0], -2.0 * dx[1], s * p.s_w - 2.0 * dx[2], -2.0 * dx[3]];
    let hh = [-2.0 * dy[0], -2.0 * dy[1], -2.0 * dy[2], s * p.s_h - 2.0 * dy[3]];
    [(x, cx), (y, cy), (w, -2.0 * cx), (hh, -2.0 * cy)]
}

pub fn apply_forms(forms: &[(Form, f64); 4], t: [f64; 4]) -> [f64; 4] {
    forms.map(|(c, k)| c[0] * t[0] + c[1] * t[1] + c[2] * t[2] + c[3] * t[3] + k)
}

/// Fast R-CNN base targets, written directly from corner coordinates.
pub fn reference_base_targets(anchor: &BoxPx, face: &BoxPx) -> [f64; 4] {
    let acx = (anchor.x_min + anchor.x_max()) * 0.5;
    let acy = (anchor.y_min + anchor.y_max()) * 0.5;
    let fcx = (face.x_min + face.x_max()) * 0.5;
    let fcy = (face.y_min + face.y_max()) * 0.5;
    [
        (fcx - acx) / anchor.width,
        (fcy - acy) / anchor.height,
        (face.width / anchor.width).ln(),
        (face.height / anchor.height).ln(),
    ]
}

/// The batch loss by explicit loops over images, levels and anchors, from
/// raw head values (one `N × 20 × h × w` tensor per anchor layer).
pub fn reference_loss(heads: &[Tensor<f64>], grid: &AnchorGrid, labels: &[PyramidLabelSet], cfg: &PyramidAnchorConfig) -> f64 {
    let batch = labels.len();
    let mut total = 0.0;
    for (n, set) in labels.iter().enumerate() {
        for k in 0..cfg.levels() {
            let lab = &set.levels[k];
            // (log p_face, log p_background, regression) per anchor
            let mut per_anchor: Vec<(f64, f64, [f64; 4])> = Vec::with_capacity(grid.len());
            for (l, ly) in grid.layers.iter().enumerate() {
                let t = &heads[l];
                let plane = ly.rows * ly.cols;
                let at = |c: usize, i: usize| t.data()[(n * 20 + c) * plane + i];
                let cp = if ly.spec.index == 0 { 1 } else { 3 };
                for i in 0..plane {
                    let (a, b) = match k {
                        0 => {
                            let pos = (0..cp).map(|c| at(c, i)).fold(f64::NEG_INFINITY, f64::max);
                            let neg = (cp..4).map(|c| at(c, i)).fold(f64::NEG_INFINITY, f64::max);
                            (pos, neg)
                        }
                        1 => (at(HeadLayout::HEAD_CLS, i), at(HeadLayout::HEAD_CLS + 1, i)),
                        _ => (at(HeadLayout::BODY_CLS, i), at(HeadLayout::BODY_CLS + 1, i)),
                    };
                    let lse = (a.exp() + b.exp()).ln();
                    let r0 = [HeadLayout::FACE_REG, HeadLayout::HEAD_REG, HeadLayout::BODY_REG][k.min(2)];
                    per_anchor.push((a - lse, b - lse, [at(r0, i), at(r0 + 1, i), at(r0 + 2, i), at(r0 + 3, i)]));
                }
            }
            let mut n_pos = 0;
            let mut cls = 0.0;
            let mut reg = 0.0;
            let mut negs: Vec<(f64, usize)> = Vec::new();
            for a in 0..grid.len() {
                if lab.p_star[a] == 1 {
                    n_pos += 1;
                    cls -= per_anchor[a].0;
                    let t = lab.t_star[a].unwrap();
                    for c in 0..4 {
                        reg += smooth_l1(per_anchor[a].2[c] - t[c]);
                    }
                } else if !lab.ignore[a] {
                    negs.push((-per_anchor[a].1, a));
                }
            }
            // descending loss, then ascending index
            negs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let take = match cfg.neg_pos_ratio {
                Some(r) => ((r * (n_pos.max(1)) as f64) as usize).min(negs.len()),
                None => negs.len(),
            };
            for &(v, _) in &negs[..take] {
                cls += v;
            }
            let n_cls = (n_pos + take).max(1) as f64;
            let n_reg = n_pos.max(1) as f64;
            total += cfg.lambda_k[k] * (cfg.lambda / n_cls * cls + reg / n_reg);
        }
    }
    total / batch as f64
}

/// AP as a sum over distinct recall levels of the best precision reached
/// at that recall or beyond.
pub fn manual_ap(curve: &[(f64, f64)]) -> f64 {
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for r in levels {
        let p = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Greedy matching and ranked precision/recall with no ignore logic.
pub fn manual_curve(dets: &[Vec<Detection>], gts: &[Vec<BoxPx>], iou_threshold: f64) -> Vec<(f64, f64)> {
    let mut flagged: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[b].score.partial_cmp(&d[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; g.len()];
        for i in idx {
            let mut best = (usize::MAX, -1.0);
            for (j, gt) in g.iter().enumerate() {
                let v = iou(&d[i].bbox, gt);
                if v > best.1 {
                    best = (j, v);
                }
            }
            let tp = best.1 >= iou_threshold && !used[best.0];
            if tp {
                used[best.0] = true;
            }
            flagged.push((d[i].score, img, i, tp));
        }
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let npos: usize = gts.iter().map(Vec::len).sum();
    let mut tp = 0;
    flagged
        .iter()
        .enumerate()
        .map(|(i, f)| {
            tp += f.3 as usize;
            (tp as f64 / npos as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}
