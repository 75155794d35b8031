//! JSON Lines point annotations: one `{"image": ..., "points": [[x, y], ...]}`
//! object per line, image paths relative to the annotation file.

use std::fs;
use std::path::{Path, PathBuf};

use rrp_core::data::{Point, PointAnnotation, Sample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;

/// Conventional annotation file name inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_path: PathBuf,
    pub annotation: PointAnnotation,
}

/// Image id used for an annotation: the file stem of its image path.
pub fn image_id(image: &str) -> String {
    Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

/// Parses lines, asking `dims` for each image's `(height, width)`.
pub fn parse_annotations(
    text: &str,
    path: &Path,
    mut dims: impl FnMut(&str) -> Result<(usize, usize)>,
) -> Result<Vec<PointAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let (h, w) = dims(&parsed.image)?;
        let points = parsed
            .points
            .iter()
            .map(|&[x, y]| Point::new(x, y))
            .collect();
        out.push(PointAnnotation::new(image_id(&parsed.image), h, w, points)?);
    }
    Ok(out)
}

/// Loads and validates an annotation file, reading each image's header for
/// its dimensions.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut paths = Vec::new();
    let anns = parse_annotations(&text, path, |image| {
        let p = base.join(image);
        let h = netpbm::read_header(&p)?;
        paths.push(p);
        Ok((h.height, h.width))
    })?;
    Ok(paths
        .into_iter()
        .zip(anns)
        .map(|(image_path, annotation)| AnnotatedImage {
            image_path,
            annotation,
        })
        .collect())
}

/// Images and annotations of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    load_annotations(&dir.join(ANNOTATIONS_FILE))?
        .into_iter()
        .map(|a| {
            let image = netpbm::load_image(&a.image_path)?;
            Ok(Sample::new(image, a.annotation)?)
        })
        .collect()
}

pub fn annotation_line(image: &str, ann: &PointAnnotation) -> String {
    let line = AnnotationLine {
        image: image.to_string(),
        points: ann.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    serde_json::to_string(&line).expect("annotation lines serialize")
}
