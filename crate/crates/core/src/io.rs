//! PNG/JPEG decoding and encoding plus atomic file writes.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, ImageReader};
use thiserror::Error;

use crate::raster::Image;

/// Failure to turn bytes into a page, independent of where the bytes came from.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("unsupported image format (expected PNG or JPEG)")]
    Unsupported,
    #[error("corrupt image data: {0}")]
    Corrupt(String),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: DecodeError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image encoding failed: {0}")]
    Encode(String),
}

pub fn decode_image(bytes: &[u8]) -> Result<Image, DecodeError> {
    let format = image::guess_format(bytes).map_err(|_| DecodeError::Unsupported)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(DecodeError::Unsupported);
    }
    let reader = ImageReader::with_format(Cursor::new(bytes), format);
    let img = reader.decode().map_err(|e| DecodeError::Corrupt(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// Reads a PNG or JPEG page as 8-bit sRGB; grayscale and alpha inputs are converted.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => IoError::MissingFile(path.to_path_buf()),
        _ => IoError::Io { path: path.to_path_buf(), source },
    })?;
    decode_image(&bytes).map_err(|source| IoError::Decode { path: path.to_path_buf(), source })
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("PNG encoding into memory does not fail");
    out
}

pub fn encode_gray_png(img: &image::GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("PNG encoding into memory does not fail");
    out
}

pub fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
        .encode_image(img)
        .map_err(|e| IoError::Encode(e.to_string()))?;
    Ok(out)
}

/// Writes via a sibling temporary file and a rename, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), IoError> {
    let path = path.as_ref();
    let io_err = |source| IoError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_atomic(path, &encode_png(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_pixels_survive() {
        let mut img = Image::new(2, 1);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.put_pixel(1, 0, image::Rgb([0, 0, 255]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn grayscale_is_promoted() {
        let gray = image::GrayImage::from_raw(2, 1, vec![10, 200]).unwrap();
        let img = decode_image(&encode_gray_png(&gray)).unwrap();
        assert_eq!(img.get_pixel(1, 0).0, [200, 200, 200]);
    }

    #[test]
    fn jpeg_decodes() {
        let img = Image::from_pixel(16, 16, image::Rgb([120, 130, 140]));
        let back = decode_image(&encode_jpeg(&img, 95).unwrap()).unwrap();
        assert_eq!(back.dimensions(), (16, 16));
        let p = back.get_pixel(5, 5).0;
        assert!((p[0] as i16 - 120).abs() <= 3, "{p:?}");
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(IoError::MissingFile(_))));

        let text = dir.path().join("notes.png");
        fs::write(&text, b"just some text").unwrap();
        assert!(matches!(load_image(&text), Err(IoError::Decode { source: DecodeError::Unsupported, .. })));

        let mut png = encode_png(&Image::new(8, 8));
        png.truncate(png.len() - 20);
        let broken = dir.path().join("broken.png");
        fs::write(&broken, &png).unwrap();
        assert!(matches!(load_image(&broken), Err(IoError::Decode { source: DecodeError::Corrupt(_), .. })));
    }
}
