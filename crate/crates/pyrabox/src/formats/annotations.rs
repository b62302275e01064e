//! WIDER-style annotation text: blocks of an image path, a face count and
//! one `x y w h [attributes…]` line per face.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pyrabox_core::geometry::BoxPx;

use crate::error::{AppError, AppResult, FormatError};

/// Placeholder line written after a zero face count.
const EMPTY_PLACEHOLDER: &str = "0 0 0 0 0 0 0 0 0 0";

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub path: String,
    pub faces: Vec<BoxPx>,
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut out = Vec::new();
    loop {
        let Some((_, path)) = lines.by_ref().find(|(_, l)| !l.is_empty()) else { break };
        let (count_line, count_text) = lines
            .next()
            .ok_or_else(|| FormatError::Truncated(format!("block for {path} has no face count")))?;
        let count: usize = count_text
            .parse()
            .map_err(|_| FormatError::line(count_line, format!("malformed face count {count_text:?}")))?;
        let mut faces = Vec::with_capacity(count);
        if count == 0 {
            lines.next();
        }
        for i in 0..count {
            let Some((ln, box_text)) = lines.next() else {
                return Err(FormatError::line(
                    count_line + i + 1,
                    format!("face count {count} for {path} but the file ends after {i} box lines"),
                ));
            };
            if let Some(b) = parse_box(ln, box_text)? {
                faces.push(b);
            }
        }
        out.push(Annotation { path: path.to_string(), faces });
    }
    Ok(out)
}

fn parse_box(line: usize, text: &str) -> Result<Option<BoxPx>, FormatError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(FormatError::line(line, format!("expected `x y w h`, got {text:?}")));
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| FormatError::line(line, format!("box field {f:?} is not a number")))?;
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(FormatError::line(line, format!("negative box extent {} × {}", v[2], v[3])));
    }
    if v[2] == 0.0 || v[3] == 0.0 {
        return Ok(None);
    }
    Ok(Some(BoxPx::new(v[0], v[1], v[2], v[3])))
}

pub fn serialize_annotations(blocks: &[Annotation]) -> String {
    let mut out = String::new();
    for b in blocks {
        let _ = writeln!(out, "{}\n{}", b.path, b.faces.len());
        if b.faces.is_empty() {
            let _ = writeln!(out, "{EMPTY_PLACEHOLDER}");
        }
        for f in &b.faces {
            let _ = writeln!(out, "{} {} {} {}", f.x_min, f.y_min, f.width, f.height);
        }
    }
    out
}

pub fn load_annotations(path: &Path) -> AppResult<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_annotations(&text).map_err(|e| AppError::format(path, e))
}

pub fn write_annotations(path: &Path, blocks: &[Annotation]) -> AppResult<()> {
    fs::write(path, serialize_annotations(blocks)).map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_face_with_attributes() {
        let a = parse_annotations("img/a.ppm\n1\n10 20 30 40 0 0 0 0 0 0\n").unwrap();
        assert_eq!(a, vec![Annotation { path: "img/a.ppm".into(), faces: vec![BoxPx::new(10.0, 20.0, 30.0, 40.0)] }]);
    }

    #[test]
    fn truncated_block_names_line() {
        let err = parse_annotations("a.ppm\n2\n1 2 3 4\n").unwrap_err();
        assert!(matches!(err, FormatError::Line { line: 4, .. }), "{err}");
    }

    #[test]
    fn empty_block_consumes_placeholder() {
        let text = "a.ppm\n0\n0 0 0 0 0 0 0 0 0 0\nb.ppm\n1\n1 1 5 5\n";
        let a = parse_annotations(text).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a[0].faces.is_empty());
        assert_eq!(serialize_annotations(&a), text);
    }

    #[test]
    fn bad_count_and_extent() {
        assert!(matches!(parse_annotations("a\nx\n"), Err(FormatError::Line { line: 2, .. })));
        assert!(matches!(parse_annotations("a\n1\n0 0 -3 4\n"), Err(FormatError::Line { line: 3, .. })));
        let zero = parse_annotations("a\n2\n0 0 0 4\n1 1 2 2\n").unwrap();
        assert_eq!(zero[0].faces, vec![BoxPx::new(1.0, 1.0, 2.0, 2.0)]);
    }
}
