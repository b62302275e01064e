//! On-disk formats.

pub mod annotations;
pub mod model;
pub mod ppm;

use std::fmt::Write as _;

use pyrabox_core::anchors::AnchorGrid;
use pyrabox_core::eval::EvalReport;
use pyrabox_core::geometry::{BoxPx, Detection};
use pyrabox_core::sampling::SampleReport;
use serde::Serialize;

use crate::error::FormatError;

/// A detection tagged with its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLine {
    pub path: String,
    pub det: Detection,
}

/// `path x_min y_min width height score`, score with six decimals.
pub fn format_detections(lines: &[DetectionLine]) -> String {
    let mut out = String::new();
    for l in lines {
        let b = &l.det.bbox;
        let _ = writeln!(out, "{} {} {} {} {} {:.6}", l.path, b.x_min, b.y_min, b.width, b.height, l.det.score);
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionLine>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(FormatError::line(i + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| FormatError::line(i + 1, format!("{f:?} is not a number")))?;
        }
        out.push(DetectionLine {
            path: fields[0].to_string(),
            det: Detection::face(BoxPx::new(v[0], v[1], v[2], v[3]), v[4]),
        });
    }
    Ok(out)
}

/// `recall,precision` rows then `AP,<value>`.
pub fn format_eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &report.curve {
        let _ = writeln!(out, "{r},{p}");
    }
    let _ = writeln!(out, "AP,{}", report.ap);
    out
}

#[derive(Serialize)]
struct AnchorRecord {
    layer: usize,
    row: usize,
    col: usize,
    x_min: f64,
    y_min: f64,
    side: f64,
}

/// One JSON object per anchor.
pub fn format_anchors_jsonl(grid: &AnchorGrid) -> String {
    let mut out = String::new();
    for (i, b) in grid.boxes.iter().enumerate() {
        let (layer, row, col) = grid.locate(i);
        let rec = AnchorRecord { layer, row, col, x_min: b.x_min, y_min: b.y_min, side: b.width };
        out.push_str(&serde_json::to_string(&rec).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

/// `lo,hi,pre,post` bins of face size before and after sampling.
pub fn format_histogram_csv(report: &SampleReport) -> String {
    let mut out = String::from("size_lo,size_hi,pre,post\n");
    for &(lo, hi, pre, post) in &report.bins {
        let _ = writeln!(out, "{lo},{hi},{pre},{post}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detections_round_trip() {
        let lines = vec![DetectionLine { path: "a.ppm".into(), det: Detection::face(BoxPx::new(1.5, 2.0, 30.0, 40.25), 0.875) }];
        let text = format_detections(&lines);
        assert_eq!(text, "a.ppm 1.5 2 30 40.25 0.875000\n");
        assert_eq!(parse_detections(&text).unwrap(), lines);
        assert!(parse_detections("a 1 2 3\n").is_err());
    }
}
