//! Annotated image sets on disk.

use std::path::Path;

use pyrabox_core::sampling::SampleRecord;

use crate::error::AppResult;
use crate::formats::annotations::{load_annotations, Annotation};
use crate::formats::ppm::load_ppm;

/// Loads every annotated image; paths in the annotation file are relative
/// to `images_root`. Faces are clipped to their image.
pub fn load_records(annotations: &Path, images_root: &Path) -> AppResult<Vec<SampleRecord>> {
    load_annotations(annotations)?.into_iter().map(|a| load_record(a, images_root)).collect()
}

pub fn load_record(a: Annotation, images_root: &Path) -> AppResult<SampleRecord> {
    let image = load_ppm(&images_root.join(&a.path))?;
    let mut rec = SampleRecord { image, faces: a.faces, source_path: a.path };
    rec.clip_faces();
    Ok(rec)
}
