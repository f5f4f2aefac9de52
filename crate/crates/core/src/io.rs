//! File interchange: PNG images and label maps, annotation JSON.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::annotations::{annotations_from_json, annotations_to_json, LabelMap, SparseAnnotation};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => other.into(),
    })
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    image.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit single-channel PNG; value 255 means unlabeled.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: label maps must be 8-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    LabelMap::from_values(h as usize, w as usize, gray.into_raw())
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let gray = GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.values().to_vec(),
    )
    .expect("buffer sized to dimensions");
    gray.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<SparseAnnotation>> {
    annotations_from_json(&fs::read_to_string(path)?)
}

pub fn write_annotations(path: &Path, annotations: &[SparseAnnotation]) -> Result<()> {
    fs::write(path, annotations_to_json(annotations)? + "\n")?;
    Ok(())
}
