//! Image decoding and encoding for the supported upload formats.

use std::io::Cursor;
use std::path::Path;

use habitat_core::raster::Raster;
use image::{ImageFormat, RgbImage};

use crate::error::{HabitatError, IoContext, Result};

/// File extensions accepted for ingestion and upload (lowercase).
pub const SUPPORTED_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

pub fn has_supported_extension(name: &str) -> bool {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn decode_error(name: &str, message: impl Into<String>) -> HabitatError {
    HabitatError::Decode {
        name: name.to_string(),
        message: message.into(),
    }
}

/// JPEG streams must end with an EOI marker; some decoders silently pad a
/// truncated scan instead of failing, so check explicitly. Trailing zero
/// padding after the marker is tolerated.
fn jpeg_is_complete(bytes: &[u8]) -> bool {
    let end = bytes.iter().rposition(|b| *b != 0).map_or(0, |i| i + 1);
    end >= 2 && bytes[end - 2..end] == [0xFF, 0xD9]
}

/// Decodes a JPEG or PNG byte stream to an RGB raster. `name` is used only
/// in error messages.
pub fn decode_image(bytes: &[u8], name: &str) -> Result<Raster> {
    let format = image::guess_format(bytes).map_err(|e| decode_error(name, e.to_string()))?;
    match format {
        ImageFormat::Jpeg if !jpeg_is_complete(bytes) => {
            return Err(decode_error(name, "truncated JPEG stream (no end-of-image marker)"))
        }
        ImageFormat::Jpeg | ImageFormat::Png => {}
        other => return Err(decode_error(name, format!("unsupported format {other:?}"))),
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_error(name, e.to_string()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::new(w as usize, h as usize, img.into_raw())?)
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).at(path)?;
    decode_image(&bytes, &path.display().to_string())
}

fn to_rgb_image(raster: &Raster) -> RgbImage {
    RgbImage::from_raw(
        raster.width() as u32,
        raster.height() as u32,
        raster.as_bytes().to_vec(),
    )
    .expect("raster buffer matches its dimensions")
}

pub fn encode_png(raster: &Raster) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_rgb_image(raster)
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_jpeg(raster: &Raster) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_rgb_image(raster)
        .write_to(&mut out, ImageFormat::Jpeg)
        .expect("in-memory JPEG encoding");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster {
        Raster::from_fn(17, 9, |x, y| [(x * 15) as u8, (y * 28) as u8, 77]).unwrap()
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let r = sample();
        assert_eq!(decode_image(&encode_png(&r), "a.png").unwrap(), r);
    }

    #[test]
    fn jpeg_decodes_to_same_size() {
        let out = decode_image(&encode_jpeg(&sample()), "a.jpg").unwrap();
        assert_eq!((out.width(), out.height()), (17, 9));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let jpg = encode_jpeg(&sample());
        let err = decode_image(&jpg[..jpg.len() / 2], "cut.jpg").unwrap_err();
        assert!(err.to_string().contains("cut.jpg"), "{err}");
        let png = encode_png(&sample());
        assert!(decode_image(&png[..png.len() - 20], "cut.png").is_err());
        assert!(decode_image(b"not an image", "x.png").is_err());
    }

    #[test]
    fn extensions() {
        assert!(has_supported_extension("a.JPG"));
        assert!(has_supported_extension("dir/b.jpeg"));
        assert!(has_supported_extension("c.png"));
        assert!(!has_supported_extension("d.gif"));
        assert!(!has_supported_extension("noext"));
    }
}
