//! Training-sample preparation: baseline photometric/geometric augmentation
//! and data-anchor-sampling.
//!
//! Data-anchor-sampling picks a face, snaps its size to the nearest anchor
//! scale, then draws a target scale at or below one level above that anchor
//! and resizes the whole image so the face lands on it. Small faces become
//! far more common in the training stream than in the source data.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::BoxPx;
use crate::image::Image;

/// Number of anchor scales, `s_i = 2^(4+i)`.
pub const ANCHOR_LEVELS: usize = 6;

pub fn anchor_scale(i: usize) -> f64 {
    (1u64 << (4 + i)) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Image,
    pub faces: Vec<BoxPx>,
    pub source_path: String,
}

impl SampleRecord {
    /// Drops faces that miss the image and clips the rest to it.
    pub fn clip_faces(&mut self) {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.faces = self.faces.iter().filter_map(|f| f.clip(w, h)).collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerDraw {
    pub face_index: usize,
    pub s_face: f64,
    pub i_anchor: usize,
    pub i_target: usize,
    pub s_target: f64,
    pub s_star: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCrop {
    pub image: Image,
    pub faces: Vec<BoxPx>,
    pub provenance: Option<SamplerDraw>,
}

/// Index of the anchor scale nearest to `s_face` (smaller index on ties).
pub fn nearest_anchor_index(s_face: f64) -> usize {
    let mut best = 0;
    for i in 1..ANCHOR_LEVELS {
        if (anchor_scale(i) - s_face).abs() < (anchor_scale(best) - s_face).abs() {
            best = i;
        }
    }
    best
}

/// Candidate target indices `0..=min(5, i_anchor + 1)`, restricted to scales
/// whose lower bound `s_i / 2` still fits inside the crop.
pub fn target_indices(i_anchor: usize, crop_side: usize) -> Vec<usize> {
    (0..=(i_anchor + 1).min(ANCHOR_LEVELS - 1))
        .filter(|&i| anchor_scale(i) / 2.0 < crop_side as f64)
        .collect()
}

/// Draws target index and size for a face of size `s_face`. The target size
/// is uniform on `[s_i / 2, min(2·s_i, crop_side))`.
pub fn draw_target(rng: &mut impl Rng, s_face: f64, crop_side: usize) -> Result<(usize, usize, f64)> {
    if !(s_face > 0.0) {
        return Err(Error::contract("selected face has zero size"));
    }
    let i_anchor = nearest_anchor_index(s_face);
    let candidates = target_indices(i_anchor, crop_side);
    if candidates.is_empty() {
        return Err(Error::config(alloc::format!("crop side {crop_side} admits no anchor scale")));
    }
    let i_target = candidates[rng.gen_range(0..candidates.len())];
    let s = anchor_scale(i_target);
    let hi = (2.0 * s).min(crop_side as f64);
    let s_target = rng.gen_range(s / 2.0..hi);
    Ok((i_anchor, i_target, s_target))
}

fn place_window(lo_face: f64, hi_face: f64, resized: f64, crop: f64, rng: &mut impl Rng) -> f64 {
    let (bound_lo, bound_hi) = if resized >= crop { (0.0, resized - crop) } else { (resized - crop, 0.0) };
    let lo = (hi_face - crop).max(bound_lo).ceil();
    let hi = lo_face.min(bound_hi).floor();
    if lo > hi {
        return (hi_face - crop).ceil();
    }
    rng.gen_range(lo as i64..=hi as i64) as f64
}

/// Moves boxes into a window's coordinates, drops those whose centre falls
/// outside it and clips the rest.
pub fn crop_boxes(faces: &[BoxPx], scale: f64, x0: f64, y0: f64, side_w: f64, side_h: f64) -> Vec<BoxPx> {
    faces
        .iter()
        .filter_map(|f| {
            let b = BoxPx::new(f.x_min * scale - x0, f.y_min * scale - y0, f.width * scale, f.height * scale);
            let (cx, cy) = b.center();
            if cx < 0.0 || cy < 0.0 || cx >= side_w || cy >= side_h {
                return None;
            }
            b.clip(side_w, side_h)
        })
        .collect()
}

/// Data-anchor-sampling: rescales the record so a random face matches a
/// random anchor-derived size, then cuts a `crop_side²` window containing
/// that face. Areas beyond the resized image take the mean colour.
pub fn data_anchor_sample(rec: &SampleRecord, rng: &mut impl Rng, crop_side: usize) -> Result<TrainCrop> {
    if rec.faces.is_empty() {
        return Err(Error::contract("data-anchor-sampling needs at least one face"));
    }
    let face_index = rng.gen_range(0..rec.faces.len());
    let face = rec.faces[face_index];
    let s_face = face.size();
    let (i_anchor, i_target, mut s_target) = draw_target(rng, s_face, crop_side)?;
    let crop = crop_side as f64;
    let mut s_star = s_target / s_face;
    // elongated faces: keep the longer side strictly inside the window
    let longest = face.width.max(face.height) * s_star;
    if longest > crop - 1.0 {
        s_star *= (crop - 1.0) / longest;
        s_target = s_star * s_face;
    }
    let fx = (face.x_min * s_star, face.x_max() * s_star);
    let fy = (face.y_min * s_star, face.y_max() * s_star);
    let x0 = place_window(fx.0, fx.1, rec.image.width as f64 * s_star, crop, rng);
    let y0 = place_window(fy.0, fy.1, rec.image.height as f64 * s_star, crop, rng);
    let image = rec.image.resample(s_star, x0, y0, crop_side, crop_side, rec.image.mean_color());
    let faces = crop_boxes(&rec.faces, s_star, x0, y0, crop, crop);
    Ok(TrainCrop {
        image,
        faces,
        provenance: Some(SamplerDraw { face_index, s_face, i_anchor, i_target, s_target, s_star }),
    })
}

/// Aspect-preserving resize into a `side²` canvas anchored at the top-left;
/// the remainder takes the mean colour. Returns the scale applied.
pub fn letterbox(rec: &SampleRecord, side: usize) -> (TrainCrop, f64) {
    let scale = side as f64 / rec.image.width.max(rec.image.height) as f64;
    let image = if scale == 1.0 && rec.image.width == side && rec.image.height == side {
        rec.image.clone()
    } else {
        rec.image.resample(scale, 0.0, 0.0, side, side, rec.image.mean_color())
    };
    let faces = crop_boxes(&rec.faces, scale, 0.0, 0.0, side as f64, side as f64);
    (TrainCrop { image, faces, provenance: None }, scale)
}

/// Random choices of one baseline augmentation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// `(contrast, brightness)`.
    pub jitter: Option<(f64, f64)>,
    /// `(x0, y0, side)` of a square crop.
    pub crop: Option<(usize, usize, usize)>,
}

impl AugmentDraw {
    pub const NONE: AugmentDraw = AugmentDraw { flip: false, jitter: None, crop: None };

    pub fn draw(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let jitter = rng.gen_bool(0.5).then(|| (rng.gen_range(0.8..=1.2), rng.gen_range(-16.0..=16.0)));
        let crop = rng.gen_bool(0.5).then(|| {
            let min_side = width.min(height);
            let side = ((min_side as f64 * rng.gen_range(0.5..=1.0)).round() as usize).clamp(1, min_side);
            (rng.gen_range(0..=width - side), rng.gen_range(0..=height - side), side)
        });
        AugmentDraw { flip, jitter, crop }
    }
}

/// `clamp(round(v·contrast + brightness), 0, 255)`.
pub fn jitter_byte(v: u8, contrast: f64, brightness: f64) -> u8 {
    (v as f64 * contrast + brightness).round().clamp(0.0, 255.0) as u8
}

pub fn apply_augment(rec: &SampleRecord, draw: &AugmentDraw) -> SampleRecord {
    let mut out = rec.clone();
    if draw.flip {
        let w = out.image.width;
        for row in out.image.data.chunks_exact_mut(w * 3) {
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                }
            }
        }
        for f in &mut out.faces {
            f.x_min = w as f64 - f.x_min - f.width;
        }
    }
    if let Some((contrast, brightness)) = draw.jitter {
        for v in &mut out.image.data {
            *v = jitter_byte(*v, contrast, brightness);
        }
    }
    if let Some((x0, y0, side)) = draw.crop {
        let src = &out.image;
        let mut data = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let start = (y * src.width + x0) * 3;
            data.extend_from_slice(&src.data[start..start + side * 3]);
        }
        let faces = crop_boxes(&out.faces, 1.0, x0 as f64, y0 as f64, side as f64, side as f64);
        out.image = Image { width: side, height: side, data };
        out.faces = faces;
    }
    out
}

/// Horizontal flip, brightness/contrast jitter and a square crop, each with
/// probability 0.5.
pub fn baseline_augment(rec: &SampleRecord, rng: &mut impl Rng) -> SampleRecord {
    let draw = AugmentDraw::draw(rng, rec.image.width, rec.image.height);
    apply_augment(rec, &draw)
}

/// Face-size histograms before and after sampling, on power-of-two bins.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    /// `(lower edge, upper edge, pre count, post count)`; the last upper edge
    /// is infinite.
    pub bins: Vec<(f64, f64, usize, usize)>,
    pub mean_pre: f64,
    pub mean_post: f64,
    /// Fraction of faces below 64 px before and after.
    pub small_mass_pre: f64,
    pub small_mass_post: f64,
}

impl SampleReport {
    /// On data whose faces are all at least 64 px, sampling must move mass
    /// below 64 px. `None` when the precondition does not hold.
    pub fn small_face_shift_ok(&self) -> Option<bool> {
        (self.small_mass_pre == 0.0).then_some(self.small_mass_post > self.small_mass_pre)
    }
}

pub fn sample_report(draws: &[SamplerDraw]) -> Result<SampleReport> {
    if draws.is_empty() {
        return Err(Error::contract("sample report needs at least one draw"));
    }
    let mut edges: Vec<f64> = alloc::vec![0.0];
    edges.extend((3..=10).map(|p| (1u32 << p) as f64));
    edges.push(f64::INFINITY);
    let mut bins: Vec<(f64, f64, usize, usize)> = edges.windows(2).map(|w| (w[0], w[1], 0, 0)).collect();
    let bin_of = |v: f64| bins.iter().position(|b| v >= b.0 && v < b.1).unwrap_or(0);
    let mut placed = Vec::with_capacity(draws.len());
    for d in draws {
        placed.push((bin_of(d.s_face), bin_of(d.s_target)));
    }
    for (pre, post) in placed {
        bins[pre].2 += 1;
        bins[post].3 += 1;
    }
    let n = draws.len() as f64;
    Ok(SampleReport {
        bins,
        mean_pre: draws.iter().map(|d| d.s_face).sum::<f64>() / n,
        mean_post: draws.iter().map(|d| d.s_target).sum::<f64>() / n,
        small_mass_pre: draws.iter().filter(|d| d.s_face < 64.0).count() as f64 / n,
        small_mass_post: draws.iter().filter(|d| d.s_target < 64.0).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(w: usize, h: usize, faces: Vec<BoxPx>) -> SampleRecord {
        let data = (0..w * h * 3).map(|i| (i * 31 % 251) as u8).collect();
        SampleRecord { image: Image::new(w, h, data).unwrap(), faces, source_path: "x.ppm".into() }
    }

    #[test]
    fn worked_example_face_140() {
        assert_eq!(nearest_anchor_index(140.0), 3);
        let sizes: Vec<f64> = target_indices(3, 640).into_iter().map(anchor_scale).collect();
        assert_eq!(sizes, alloc::vec![16.0, 32.0, 64.0, 128.0, 256.0]);
        let s_star: f64 = 32.0 / 140.0;
        assert!((s_star - 0.2285).abs() < 1e-4);
    }

    #[test]
    fn smallest_scale_tie_breaks() {
        assert_eq!(nearest_anchor_index(16.0), 0);
        assert_eq!(target_indices(0, 640), alloc::vec![0, 1]);
        // 24 is equidistant from 16 and 32
        assert_eq!(nearest_anchor_index(24.0), 0);
        assert_eq!(nearest_anchor_index(5000.0), 5);
    }

    #[test]
    fn toy_crop_excludes_oversized_targets() {
        assert_eq!(target_indices(5, 160), alloc::vec![0, 1, 2, 3, 4]);
        assert_eq!(target_indices(5, 128), alloc::vec![0, 1, 2, 3]);
    }

    #[test]
    fn crop_contains_selected_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = record(300, 200, alloc::vec![BoxPx::new(40.0, 50.0, 140.0, 140.0), BoxPx::new(250.0, 10.0, 30.0, 30.0)]);
        for _ in 0..200 {
            let crop = data_anchor_sample(&rec, &mut rng, 160).unwrap();
            let d = crop.provenance.unwrap();
            assert_eq!((crop.image.width, crop.image.height), (160, 160));
            assert!(d.i_target <= (d.i_anchor + 1).min(5));
            let sel = rec.faces[d.face_index];
            let expect = BoxPx::new(sel.x_min * d.s_star, sel.y_min * d.s_star, sel.width * d.s_star, sel.height * d.s_star);
            // the selected face survives unclipped (same extents after the shift)
            assert!(crop.faces.iter().any(|f| (f.width - expect.width).abs() < 1e-9
                && (f.height - expect.height).abs() < 1e-9
                && f.x_min >= 0.0 && f.y_min >= 0.0 && f.x_max() <= 160.0 && f.y_max() <= 160.0));
        }
    }

    #[test]
    fn no_faces_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(data_anchor_sample(&record(8, 8, alloc::vec![]), &mut rng, 640), Err(Error::Contract(_))));
    }

    #[test]
    fn flip_mirrors_boxes() {
        let rec = record(100, 50, alloc::vec![BoxPx::new(10.0, 5.0, 30.0, 20.0)]);
        let out = apply_augment(&rec, &AugmentDraw { flip: true, ..AugmentDraw::NONE });
        assert_eq!(out.faces[0].x_min, 60.0);
        assert_eq!(out.image.pixel(0, 3), rec.image.pixel(99, 3));
        assert_eq!(apply_augment(&out, &AugmentDraw { flip: true, ..AugmentDraw::NONE }), rec);
    }

    #[test]
    fn identity_draw_leaves_record_unchanged() {
        let rec = record(20, 30, alloc::vec![BoxPx::new(1.0, 2.0, 5.0, 6.0)]);
        assert_eq!(apply_augment(&rec, &AugmentDraw::NONE), rec);
    }

    #[test]
    fn jitter_extremes_stay_in_range() {
        for &(c, b) in &[(0.8, -16.0), (0.8, 16.0), (1.2, -16.0), (1.2, 16.0)] {
            for v in 0..=255u8 {
                let expect = (v as f64 * c + b).round().clamp(0.0, 255.0);
                assert_eq!(jitter_byte(v, c, b) as f64, expect);
            }
        }
        assert_eq!(jitter_byte(255, 1.2, 16.0), 255);
        assert_eq!(jitter_byte(0, 0.8, -16.0), 0);
    }

    #[test]
    fn square_crop_moves_boxes() {
        let rec = record(100, 80, alloc::vec![BoxPx::new(30.0, 30.0, 20.0, 20.0), BoxPx::new(0.0, 0.0, 10.0, 10.0)]);
        let out = apply_augment(&rec, &AugmentDraw { crop: Some((20, 20, 50)), ..AugmentDraw::NONE });
        assert_eq!((out.image.width, out.image.height), (50, 50));
        assert_eq!(out.faces, alloc::vec![BoxPx::new(10.0, 10.0, 20.0, 20.0)]);
        assert_eq!(out.image.pixel(0, 0), rec.image.pixel(20, 20));
    }

    #[test]
    fn report_needs_draws_and_shifts_mass() {
        assert!(sample_report(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<SamplerDraw> = (0..2000)
            .map(|_| {
                let (i_anchor, i_target, s_target) = draw_target(&mut rng, 140.0, 640).unwrap();
                SamplerDraw { face_index: 0, s_face: 140.0, i_anchor, i_target, s_target, s_star: s_target / 140.0 }
            })
            .collect();
        let report = sample_report(&draws).unwrap();
        assert!(report.small_mass_post > 0.0);
        assert_eq!(report.small_face_shift_ok(), Some(true));
        assert!(report.mean_post < report.mean_pre);
        let total: usize = report.bins.iter().map(|b| b.3).sum();
        assert_eq!(total, 2000);
    }

    #[test]
    fn letterbox_scales_into_square() {
        let rec = record(320, 160, alloc::vec![BoxPx::new(32.0, 16.0, 64.0, 64.0)]);
        let (crop, scale) = letterbox(&rec, 160);
        assert_eq!(scale, 0.5);
        assert_eq!(crop.faces, alloc::vec![BoxPx::new(16.0, 8.0, 32.0, 32.0)]);
        assert_eq!((crop.image.width, crop.image.height), (160, 160));
    }
}
