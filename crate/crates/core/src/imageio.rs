//! PNG helpers: image dimensions, masks stored as greyscale PNGs.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use crate::domain::{DomainError, Mask};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn read_err(path: &Path, e: impl std::fmt::Display) -> ImageIoError {
    ImageIoError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Width and height without decoding the pixel data.
pub fn image_dims(path: &Path) -> Result<(u32, u32), ImageIoError> {
    ImageReader::open(path)
        .map_err(|e| read_err(path, e))?
        .with_guessed_format()
        .map_err(|e| read_err(path, e))?
        .into_dimensions()
        .map_err(|e| read_err(path, e))
}

pub fn image_dims_from_bytes(bytes: &[u8]) -> Result<(u32, u32), ImageIoError> {
    let img = image::load_from_memory(bytes).map_err(|e| ImageIoError::Read {
        path: "<inline>".into(),
        reason: e.to_string(),
    })?;
    Ok((img.width(), img.height()))
}

/// Nonzero pixels are foreground.
pub fn load_mask_png(path: &Path) -> Result<Mask, ImageIoError> {
    let img = image::open(path).map_err(|e| read_err(path, e))?.into_luma8();
    Ok(Mask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] > 0)?)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<(), ImageIoError> {
    let mut img = GrayImage::new(mask.width(), mask.height());
    for (x, y) in mask.pixels() {
        img.put_pixel(x, y, Luma([255]));
    }
    img.save(path).map_err(|e| read_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::from_fn(7, 5, |x, y| (x + y) % 3 == 0).unwrap();
        save_mask_png(&m, &p).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), m);
        assert_eq!(image_dims(&p).unwrap(), (7, 5));
        assert!(image_dims(&dir.path().join("missing.png")).is_err());
    }
}
