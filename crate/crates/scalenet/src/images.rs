//! PNG reading and writing for 8-bit RGB frames.

use std::path::Path;

use image::{ColorType, ImageReader};
use scalenet_core::imaging::Rgb8Image;

use crate::error::{Error, Result};

/// Reads an 8-bit RGB image. Grayscale and images with alpha are rejected.
pub fn read_rgb(path: &Path) -> Result<Rgb8Image> {
    let reader = ImageReader::open(path).map_err(Error::io(path))?;
    let img = reader.decode().map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::data(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Rgb8Image::from_raw(w as usize, h as usize, rgb.into_raw())?)
}

pub fn write_png(path: &Path, img: &Rgb8Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, ColorType::Rgb8)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Rgb8Image::new(5, 3);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = (k * 17 % 256) as u8;
        }
        let path = dir.path().join("a/b.png");
        write_png(&path, &img).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), img);
    }

    #[test]
    fn grayscale_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::save_buffer(&path, &[0u8; 6], 3, 2, ColorType::L8).unwrap();
        assert!(matches!(read_rgb(&path), Err(Error::Data(_))));
    }
}
