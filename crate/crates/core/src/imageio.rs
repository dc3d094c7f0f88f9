//! PNG reading and writing for [`Image`].

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::types::Image;

/// Loads an RGB image, center-cropping to a square and resizing to `resolution`.
pub fn load_image(path: &Path, resolution: usize) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let mut img = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize != resolution {
        img = image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle);
    }
    Image::from_rgb8(resolution, resolution, img.as_raw())
}

/// Loads an RGB image as-is, for patches of arbitrary size.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let r = image.resolution() as u32;
    let buf = RgbImage::from_raw(r, r, image.to_rgb8()?)
        .ok_or_else(|| Error::Invalid("pixel buffer size mismatch".into()))?;
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(8, 8, &rgb).unwrap();
        let p = dir.path().join("a.png");
        save_image(&p, &img).unwrap();
        let back = load_image(&p, 8).unwrap();
        assert_eq!(back.to_rgb8().unwrap(), rgb);
        assert_eq!(load_image(&p, 4).unwrap().resolution(), 4);
        assert!(load_image(&dir.path().join("missing.png"), 8).is_err());
    }
}
