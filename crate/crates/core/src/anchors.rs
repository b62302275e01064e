//! Scale-equitable anchor grids, pyramid-anchor labeling and regression
//! target coding.
//!
//! Every detection layer carries one square anchor per feature cell, with
//! side four times the layer stride. A face supervises level `k` of the
//! pyramid (face, head, body for `k = 0, 1, 2`) at every anchor whose region,
//! down-sampled about the image origin by `s_pa^k`, overlaps the face by more
//! than the matching threshold.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::{iou, scale_box, BoxPx};

/// Deepest stride reached by pooling; deeper strides come from stride-2
/// convolutions and round up.
pub const POOLED_STRIDE: usize = 32;

/// Bound applied to the log-space extents before exponentiating in decode.
pub const MAX_LOG_EXTENT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorLayerSpec {
    pub index: usize,
    pub stride: usize,
    pub scale: usize,
}

impl AnchorLayerSpec {
    /// Layer `i` of the standard six-level layout: stride `2^(2+i)`, scale
    /// `2^(4+i)`.
    pub fn standard(index: usize) -> Self {
        AnchorLayerSpec { index, stride: 1 << (2 + index), scale: 1 << (4 + index) }
    }
}

pub fn standard_layers() -> Vec<AnchorLayerSpec> {
    (0..6).map(AnchorLayerSpec::standard).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrid {
    pub spec: AnchorLayerSpec,
    pub rows: usize,
    pub cols: usize,
    /// Index of this layer's first anchor in [`AnchorGrid::boxes`].
    pub offset: usize,
}

impl LayerGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All anchors of all layers, flattened layer-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub input_size: usize,
    pub layers: Vec<LayerGrid>,
    pub boxes: Vec<BoxPx>,
}

impl AnchorGrid {
    pub fn build(layers: &[AnchorLayerSpec], input_size: usize) -> Result<Self> {
        if input_size == 0 || input_size % POOLED_STRIDE != 0 {
            return Err(Error::config(format!(
                "input size {input_size} is not a positive multiple of {POOLED_STRIDE}"
            )));
        }
        for pair in layers.windows(2) {
            if pair[1].stride != 2 * pair[0].stride {
                return Err(Error::config("anchor layer strides must double"));
            }
        }
        let mut out = AnchorGrid { input_size, layers: Vec::new(), boxes: Vec::new() };
        for &spec in layers {
            if spec.scale != 4 * spec.stride {
                return Err(Error::config(format!(
                    "layer {} has scale {} but stride {}",
                    spec.index, spec.scale, spec.stride
                )));
            }
            let side = input_size.div_ceil(spec.stride);
            let offset = out.boxes.len();
            let (s, a) = (spec.stride as f64, spec.scale as f64);
            for row in 0..side {
                for col in 0..side {
                    out.boxes.push(BoxPx::from_center((col as f64 + 0.5) * s, (row as f64 + 0.5) * s, a, a));
                }
            }
            out.layers.push(LayerGrid { spec, rows: side, cols: side, offset });
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(layer, row, col)` of a flat anchor index.
    pub fn locate(&self, idx: usize) -> (usize, usize, usize) {
        let layer = self
            .layers
            .iter()
            .rposition(|l| l.offset <= idx)
            .expect("index within grid");
        let local = idx - self.layers[layer].offset;
        let cols = self.layers[layer].cols;
        (layer, local / cols, local % cols)
    }
}

/// Shift added by the context transform, possibly proportional to the
/// matching base target extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shift {
    Fixed(f64),
    /// Multiple of `t_w*` (x shift) or `t_h*` (y shift).
    TargetExtent(f64),
}

impl Shift {
    fn eval(self, extent: f64) -> f64 {
        match self {
            Shift::Fixed(v) => v,
            Shift::TargetExtent(m) => m * extent,
        }
    }
}

/// Per-level parameters of the context-box target transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextTransformParams {
    pub delta_x: Shift,
    pub delta_y: Shift,
    pub s_w: f64,
    pub s_h: f64,
}

impl ContextTransformParams {
    pub const IDENTITY: Self =
        ContextTransformParams { delta_x: Shift::Fixed(0.0), delta_y: Shift::Fixed(0.0), s_w: 1.0, s_h: 1.0 };

    /// Face and head levels use no shift; the body level narrows to 7/8 and
    /// shifts down by one target height.
    pub fn for_level(k: usize) -> Self {
        if k < 2 {
            Self::IDENTITY
        } else {
            ContextTransformParams {
                delta_x: Shift::Fixed(0.0),
                delta_y: Shift::TargetExtent(1.0),
                s_w: 7.0 / 8.0,
                s_h: 1.0,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidAnchorConfig {
    /// Pyramid-anchor stride.
    pub s_pa: f64,
    /// Highest pyramid level; levels `0..=k_max` are labeled.
    pub k_max: usize,
    pub threshold: f64,
    /// Classification/regression balance.
    pub lambda: f64,
    /// Per-level weights, `k_max + 1` entries.
    pub lambda_k: Vec<f64>,
    /// Divisors for the centre and log-extent targets.
    pub variance: [f64; 2],
    /// Negatives kept per positive in hard-negative mining; `None` keeps all.
    pub neg_pos_ratio: Option<f64>,
    /// Faces whose shorter side is below this are ignored.
    pub min_face_side: f64,
    pub transforms: Vec<ContextTransformParams>,
}

impl Default for PyramidAnchorConfig {
    fn default() -> Self {
        PyramidAnchorConfig {
            s_pa: 2.0,
            k_max: 2,
            threshold: 0.35,
            lambda: 1.0,
            lambda_k: vec![1.0, 0.5, 0.25],
            variance: [1.0, 1.0],
            neg_pos_ratio: Some(3.0),
            min_face_side: 8.0,
            transforms: (0..3).map(ContextTransformParams::for_level).collect(),
        }
    }
}

impl PyramidAnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_pa > 1.0) {
            return Err(Error::config(format!("s_pa must exceed 1, got {}", self.s_pa)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if self.lambda_k.len() != self.k_max + 1 {
            return Err(Error::config(format!(
                "lambda_k needs {} entries, got {}",
                self.k_max + 1,
                self.lambda_k.len()
            )));
        }
        // Zero switches a level off; negative weights are never meaningful.
        if self.lambda_k.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::config("lambda_k entries must be non-negative"));
        }
        if self.transforms.len() != self.k_max + 1 {
            return Err(Error::config("one context transform per pyramid level is required"));
        }
        if self.variance.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("variance entries must be positive"));
        }
        Ok(())
    }

    /// Down-sampling factor `s_pa^k`.
    pub fn level_scale(&self, k: usize) -> f64 {
        self.s_pa.powi(k as i32)
    }

    /// Number of pyramid levels the loss supervises. The head layout only has
    /// channels for face, head and body.
    pub fn levels(&self) -> usize {
        (self.k_max + 1).min(3)
    }
}

/// Targets of one pyramid level for every anchor of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLabels {
    pub k: usize,
    /// `p*` per anchor.
    pub p_star: Vec<u8>,
    /// Anchors excluded from both the positive and negative pools.
    pub ignore: Vec<bool>,
    /// `t*` for positive anchors.
    pub t_star: Vec<Option<[f64; 4]>>,
    pub matched_face: Vec<Option<usize>>,
}

impl LevelLabels {
    pub fn positives(&self) -> usize {
        self.p_star.iter().filter(|&&p| p == 1).count()
    }

    /// Positive count per anchor layer.
    pub fn positives_per_layer(&self, grid: &AnchorGrid) -> Vec<usize> {
        grid.layers
            .iter()
            .map(|l| self.p_star[l.offset..l.offset + l.len()].iter().filter(|&&p| p == 1).count())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLabelSet {
    pub levels: Vec<LevelLabels>,
}

/// IoU used by the level-`k` rule: the anchor region down-sampled by
/// `s_pa^k` against the face.
pub fn level_iou(anchor: &BoxPx, face: &BoxPx, s_pa: f64, k: usize) -> f64 {
    let down = scale_box(anchor, s_pa.powi(-(k as i32))).expect("s_pa^-k is positive");
    iou(&down, face)
}

fn is_ignored_face(face: &BoxPx, cfg: &PyramidAnchorConfig) -> bool {
    face.width.min(face.height) < cfg.min_face_side
}

/// Labels every anchor of `grid` at every pyramid level.
///
/// A level-`k` anchor is positive when its down-sampled region overlaps some
/// face by more than the threshold; it is matched to the face with the
/// highest such IoU (lower face index on ties). At level 0 every usable face
/// that cleared no anchor additionally claims its single best anchor.
pub fn label_pyramid(grid: &AnchorGrid, faces: &[BoxPx], cfg: &PyramidAnchorConfig) -> Result<PyramidLabelSet> {
    cfg.validate()?;
    let n = grid.len();
    let ignored: Vec<bool> = faces.iter().map(|f| is_ignored_face(f, cfg)).collect();
    let mut levels = Vec::with_capacity(cfg.k_max + 1);
    for k in 0..=cfg.k_max {
        let mut p_star = vec![0u8; n];
        let mut ignore = vec![false; n];
        let mut matched = vec![None; n];
        let mut best_iou = vec![0.0f64; n];
        // per face: (best iou, anchor), for the level-0 guarantee
        let mut face_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); faces.len()];
        let mut face_hit = vec![false; faces.len()];
        for (a, anchor) in grid.boxes.iter().enumerate() {
            for (f, face) in faces.iter().enumerate() {
                let v = level_iou(anchor, face, cfg.s_pa, k);
                if v > face_best[f].0 {
                    face_best[f] = (v, Some(a));
                }
                if v > cfg.threshold {
                    if ignored[f] {
                        ignore[a] = true;
                        continue;
                    }
                    face_hit[f] = true;
                    if matched[a].is_none() || v > best_iou[a] {
                        matched[a] = Some(f);
                        best_iou[a] = v;
                    }
                }
            }
        }
        if k == 0 {
            for f in 0..faces.len() {
                if ignored[f] || face_hit[f] {
                    continue;
                }
                if let (v, Some(a)) = face_best[f] {
                    if v > 0.0 {
                        matched[a] = Some(f);
                    }
                }
            }
        }
        let params = cfg.transforms[k];
        let mut t_star = vec![None; n];
        for a in 0..n {
            if let Some(f) = matched[a] {
                p_star[a] = 1;
                ignore[a] = false;
                t_star[a] = Some(encode_with(&grid.boxes[a], &faces[f], k, cfg.s_pa, &params, cfg.variance)?);
            }
        }
        levels.push(LevelLabels { k, p_star, ignore, t_star, matched_face: matched });
    }
    Ok(PyramidLabelSet { levels })
}

/// Base regression parameters of `face` relative to `anchor`:
/// centre offsets in anchor units and log extent ratios.
pub fn base_targets(anchor: &BoxPx, face: &BoxPx, variance: [f64; 2]) -> Result<[f64; 4]> {
    if !(anchor.area() > 0.0) {
        return Err(Error::contract("anchor must have positive area"));
    }
    if !(face.area() > 0.0) {
        return Err(Error::contract("matched face must have positive area"));
    }
    let (ax, ay) = anchor.center();
    let (fx, fy) = face.center();
    Ok([
        (fx - ax) / anchor.width / variance[0],
        (fy - ay) / anchor.height / variance[0],
        (face.width / anchor.width).ln() / variance[1],
        (face.height / anchor.height).ln() / variance[1],
    ])
}

/// Applies the level-`k` context transform to base targets. Extents stay
/// in log space: `s_pa^k` and the scale factors multiply `t_w*`, `t_h*`
/// directly.
pub fn context_transform(base: [f64; 4], k: usize, s_pa: f64, params: &ContextTransformParams) -> [f64; 4] {
    let [tx, ty, tw, th] = base;
    let s = s_pa.powi(k as i32);
    let half = (1.0 - s) / 2.0;
    let dx = params.delta_x.eval(tw);
    let dy = params.delta_y.eval(th);
    [
        tx + half * tw * params.s_w + dx,
        ty + half * th * params.s_h + dy,
        s * tw * params.s_w - 2.0 * dx,
        s * th * params.s_h - 2.0 * dy,
    ]
}

fn encode_with(
    anchor: &BoxPx,
    face: &BoxPx,
    k: usize,
    s_pa: f64,
    params: &ContextTransformParams,
    variance: [f64; 2],
) -> Result<[f64; 4]> {
    Ok(context_transform(base_targets(anchor, face, variance)?, k, s_pa, params))
}

/// Level-`k` regression target of `face` against `anchor` with unit
/// variance.
pub fn encode_targets(
    anchor: &BoxPx,
    face: &BoxPx,
    k: usize,
    s_pa: f64,
    params: &ContextTransformParams,
) -> Result<[f64; 4]> {
    encode_with(anchor, face, k, s_pa, params, [1.0, 1.0])
}

/// Inverse of the level-0 encoding. Log extents are clamped to
/// `±MAX_LOG_EXTENT`; the flag reports whether clamping happened.
pub fn decode_box_flagged(anchor: &BoxPx, t: [f64; 4], variance: [f64; 2]) -> Result<(BoxPx, bool)> {
    if !(anchor.area() > 0.0) {
        return Err(Error::contract("anchor must have positive area"));
    }
    let (ax, ay) = anchor.center();
    let raw_w = t[2] * variance[1];
    let raw_h = t[3] * variance[1];
    let tw = raw_w.clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT);
    let th = raw_h.clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT);
    let clamped = tw != raw_w || th != raw_h;
    let cx = ax + t[0] * variance[0] * anchor.width;
    let cy = ay + t[1] * variance[0] * anchor.height;
    Ok((BoxPx::from_center(cx, cy, anchor.width * tw.exp(), anchor.height * th.exp()), clamped))
}

pub fn decode_box(anchor: &BoxPx, t: [f64; 4]) -> Result<BoxPx> {
    decode_box_flagged(anchor, t, [1.0, 1.0]).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(input: usize) -> AnchorGrid {
        AnchorGrid::build(&standard_layers(), input).unwrap()
    }

    #[test]
    fn full_scale_layer_sizes() {
        let g = grid(640);
        assert_eq!((g.layers[0].rows, g.layers[0].cols), (160, 160));
        assert_eq!(g.boxes[0].width, 16.0);
        assert_eq!((g.layers[5].rows, g.layers[5].cols), (5, 5));
        assert_eq!(g.boxes[g.layers[5].offset].width, 512.0);
        let expect: usize = (0..6).map(|l| (640usize >> (2 + l)).pow(2)).sum();
        assert_eq!(g.len(), expect);
    }

    #[test]
    fn toy_grid_first_anchor() {
        let g = AnchorGrid::build(&standard_layers()[..1], 64).unwrap();
        assert_eq!((g.layers[0].rows, g.layers[0].cols), (16, 16));
        assert_eq!(g.boxes[0].center(), (2.0, 2.0));
        assert_eq!(g.locate(17), (0, 1, 1));
    }

    #[test]
    fn toy_160_rounds_deep_layers_up() {
        let g = grid(160);
        let sides: Vec<usize> = g.layers.iter().map(|l| l.rows).collect();
        assert_eq!(sides, vec![40, 20, 10, 5, 3, 2]);
        assert_eq!(g.locate(g.len() - 1), (5, 1, 1));
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(matches!(AnchorGrid::build(&standard_layers(), 100), Err(Error::Config(_))));
    }

    #[test]
    fn downsampled_anchor_exact_overlap() {
        let anchor = BoxPx::new(0.0, 0.0, 256.0, 256.0);
        let face = BoxPx::new(0.0, 0.0, 128.0, 128.0);
        assert_eq!(level_iou(&anchor, &face, 2.0, 1), 1.0);
        assert_eq!(level_iou(&anchor, &face, 2.0, 0), 0.25);
    }

    #[test]
    fn level_zero_transform_is_identity() {
        let t = [0.3, -0.2, 0.7, -1.1];
        assert_eq!(context_transform(t, 0, 2.0, &ContextTransformParams::for_level(0)), t);
    }

    #[test]
    fn head_and_body_transforms() {
        let [tx, ty, tw, th] = [0.3, -0.2, 0.7, -1.1];
        let head = context_transform([tx, ty, tw, th], 1, 2.0, &ContextTransformParams::for_level(1));
        assert_eq!(head, [tx - tw / 2.0, ty - th / 2.0, 2.0 * tw, 2.0 * th]);
        let body = context_transform([tx, ty, tw, th], 2, 2.0, &ContextTransformParams::for_level(2));
        let expect = [tx - 21.0 / 16.0 * tw, ty - th / 2.0, 3.5 * tw, 2.0 * th];
        for (a, b) in body.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_zero_offsets_and_shift() {
        let a = BoxPx::new(100.0, 100.0, 64.0, 64.0);
        assert_eq!(decode_box(&a, [0.0; 4]).unwrap(), a);
        let moved = decode_box(&a, [0.5, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(moved.center(), (164.0, 132.0));
        assert!(decode_box(&BoxPx::new(0.0, 0.0, 0.0, 4.0), [0.0; 4]).is_err());
        let (b, clamped) = decode_box_flagged(&a, [0.0, 0.0, 50.0, 0.0], [1.0, 1.0]).unwrap();
        assert!(clamped);
        assert!(b.width.is_finite() && b.width > 0.0);
    }

    #[test]
    fn every_usable_face_gets_a_level_zero_anchor() {
        let g = grid(160);
        // 10 px face: too small for any anchor at threshold 0.35 when offset
        let faces = [BoxPx::new(3.0, 3.0, 10.0, 10.0), BoxPx::new(60.0, 70.0, 90.0, 50.0), BoxPx::new(0.0, 0.0, 5.0, 5.0)];
        let labels = label_pyramid(&g, &faces, &PyramidAnchorConfig::default()).unwrap();
        let lvl0 = &labels.levels[0];
        for f in 0..2 {
            assert!(lvl0.matched_face.iter().any(|&m| m == Some(f)), "face {f} has no anchor");
        }
        // sub-8 px face never becomes a target
        assert!(lvl0.matched_face.iter().all(|&m| m != Some(2)));
        for (p, t) in lvl0.p_star.iter().zip(&lvl0.t_star) {
            assert_eq!(*p == 1, t.is_some());
        }
    }

    #[test]
    fn ignored_faces_mask_anchors() {
        let g = grid(64);
        let faces = [BoxPx::new(10.0, 10.0, 7.0, 16.0)];
        let labels = label_pyramid(&g, &faces, &PyramidAnchorConfig::default()).unwrap();
        let l0 = &labels.levels[0];
        assert_eq!(l0.positives(), 0);
        assert!(l0.ignore.iter().any(|&i| i));
    }

    fn arb_box(max: f64) -> impl Strategy<Value = BoxPx> {
        (0.0..max, 0.0..max, 1.0..max, 1.0..max).prop_map(|(x, y, w, h)| BoxPx::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn level_zero_round_trip(a in arb_box(300.0), f in arb_box(300.0)) {
            let t = encode_targets(&a, &f, 0, 2.0, &ContextTransformParams::IDENTITY).unwrap();
            let back = decode_box(&a, t).unwrap();
            for (u, v) in [(back.x_min, f.x_min), (back.y_min, f.y_min), (back.width, f.width), (back.height, f.height)] {
                prop_assert!((u - v).abs() < 1e-6 * 300.0);
            }
        }

        #[test]
        fn raising_threshold_never_adds_positives(
            faces in proptest::collection::vec(arb_box(150.0), 1..4),
            lo in 0.2..0.5f64,
            bump in 0.0..0.3f64,
        ) {
            let g = grid(160);
            let mut cfg = PyramidAnchorConfig { min_face_side: 0.0, ..Default::default() };
            cfg.threshold = lo;
            let low = label_pyramid(&g, &faces, &cfg).unwrap();
            cfg.threshold = lo + bump;
            let high = label_pyramid(&g, &faces, &cfg).unwrap();
            // threshold-positives only: the level-0 guarantee can move between anchors
            for k in 1..3 {
                for (h, l) in high.levels[k].p_star.iter().zip(&low.levels[k].p_star) {
                    prop_assert!(h <= l);
                }
            }
        }
    }
}
