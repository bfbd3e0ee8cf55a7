//! Directory layout: `rgb/<stem>.ppm`, `depth/<stem>.pgm`, `gt/<stem>.pgm`.
//!
//! Contour ground truth is never read from disk; it is derived from `gt`.
//! A missing depth file is allowed and yields a sample without valid depth.

use std::fs;
use std::path::Path;

use super::{depth_for_storage, load_image, save_image, MorphConfig, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NamedSample {
    pub name: String,
    pub sample: Sample,
}

pub fn load_sample(root: impl AsRef<Path>, stem: &str, morph: MorphConfig) -> Result<Sample> {
    let root = root.as_ref();
    let rgb = load_image(root.join("rgb").join(format!("{stem}.ppm")))?;
    if rgb.shape()[0] != 3 {
        return Err(Error::Dataset(format!(
            "{stem}: rgb image must be a P6 colour image"
        )));
    }
    let gt_path = root.join("gt").join(format!("{stem}.pgm"));
    if !gt_path.exists() {
        return Err(Error::io(
            &gt_path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing saliency ground truth for {stem}"),
            ),
        ));
    }
    let gt = load_image(&gt_path)?;
    let depth_path = root.join("depth").join(format!("{stem}.pgm"));
    let depth = if depth_path.exists() {
        Some(load_image(&depth_path)?)
    } else {
        None
    };
    Sample::from_raw(rgb, depth.as_ref(), gt, morph)
        .map_err(|e| Error::Dataset(format!("{stem}: {e}")))
}

/// Loads every sample whose RGB image is present, ordered by stem.
pub fn load_dataset(root: impl AsRef<Path>, morph: MorphConfig) -> Result<Vec<NamedSample>> {
    let root = root.as_ref();
    let rgb_dir = root.join("rgb");
    let entries = fs::read_dir(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&rgb_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Dataset(format!(
            "no rgb/*.ppm images under {}",
            root.display()
        )));
    }
    stems
        .into_iter()
        .map(|name| {
            let sample = load_sample(root, &name, morph)?;
            Ok(NamedSample { name, sample })
        })
        .collect()
}

/// Writes a sample in the dataset layout. Depth is stored so that valid
/// pixels stay non-zero and reload to the same normalized values.
pub fn save_sample(root: impl AsRef<Path>, name: &str, s: &Sample) -> Result<()> {
    let root = root.as_ref();
    for sub in ["rgb", "depth", "gt"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_image(&s.rgb, root.join("rgb").join(format!("{name}.ppm")))?;
    if s.has_depth() {
        save_image(
            &depth_for_storage(s),
            root.join("depth").join(format!("{name}.pgm")),
        )?;
    }
    save_image(&s.saliency_gt, root.join("gt").join(format!("{name}.pgm")))
}
