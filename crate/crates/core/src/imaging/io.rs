use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat as CodecFormat, Luma};
use serde::{Deserialize, Serialize};

use super::grid::ImageGrid;
use crate::error::{MsmError, Result};

/// Magic prefix of the raw float format.
pub const RAW_MAGIC: &[u8; 4] = b"MSMF";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png8,
    Png16,
    Rawf32,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png8 | ImageFormat::Png16 => "png",
            ImageFormat::Rawf32 => "msmf",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = MsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png8" => Ok(Self::Png8),
            "png16" => Ok(Self::Png16),
            "rawf32" => Ok(Self::Rawf32),
            other => Err(MsmError::arg(format!("unknown image format {other:?}"))),
        }
    }
}

/// Reads an 8/16-bit grayscale PNG or a raw float file.
///
/// PNG codes are divided by the format's maximum code; float pixels pass
/// through unchanged.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MsmError::file(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.starts_with(RAW_MAGIC) {
        return decode_raw(bytes);
    }
    let img = image::load_from_memory_with_format(bytes, CodecFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(MsmError::InvalidImage("zero-sized image".into()));
    }
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|c| c as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|c| c as f64 / 65535.0).collect(),
        other => {
            return Err(MsmError::InvalidImage(format!("expected single-channel grayscale, got {:?}", other.color())))
        }
    };
    ImageGrid::new(h, w, pixels)
}

fn decode_raw(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < 12 {
        return Err(MsmError::InvalidImage("truncated raw header".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(MsmError::InvalidImage("zero-sized image".into()));
    }
    let body = &bytes[12..];
    if body.len() != 4 * h * w {
        return Err(MsmError::InvalidImage(format!("raw body holds {} bytes, expected {}", body.len(), 4 * h * w)));
    }
    let pixels = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    ImageGrid::new(h, w, pixels)
}

/// Round-half-up quantization after clamping to `[0, 1]`.
pub fn quantize(v: f64, max_code: u32) -> u32 {
    (v.clamp(0.0, 1.0) * max_code as f64 + 0.5).floor() as u32
}

pub fn encode_image(image: &ImageGrid, format: ImageFormat) -> Result<Vec<u8>> {
    image.ensure_finite()?;
    let (h, w) = (image.height() as u32, image.width() as u32);
    match format {
        ImageFormat::Rawf32 => {
            let mut out = Vec::with_capacity(12 + 4 * image.len());
            out.extend_from_slice(RAW_MAGIC);
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
            for &v in image.pixels() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            Ok(out)
        }
        ImageFormat::Png8 => {
            let raw: Vec<u8> = image.pixels().iter().map(|&v| quantize(v, 255) as u8).collect();
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("sized buffer");
            png_bytes(DynamicImage::ImageLuma8(buf))
        }
        ImageFormat::Png16 => {
            let raw: Vec<u16> = image.pixels().iter().map(|&v| quantize(v, 65535) as u16).collect();
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, raw).expect("sized buffer");
            png_bytes(DynamicImage::ImageLuma16(buf))
        }
    }
}

fn png_bytes(img: DynamicImage) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    img.write_to(&mut cursor, CodecFormat::Png)?;
    Ok(cursor.into_inner())
}

/// Writes `image`; PNG formats clamp and quantize, `Rawf32` stores `f32` bits.
pub fn save_image(image: &ImageGrid, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image, format)?;
    std::fs::write(path, bytes).map_err(|e| MsmError::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn png8_full_scale_and_zero() {
        let dir = tmp();
        for (code, want) in [(255u8, 1.0), (0u8, 0.0)] {
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(8, 8, vec![code; 64]).unwrap();
            let p = dir.path().join(format!("c{code}.png"));
            buf.save(&p).unwrap();
            let g = load_image(&p).unwrap();
            assert!(g.pixels().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn png16_half_code() {
        let dir = tmp();
        let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(8, 8, vec![32768u16; 64]).unwrap();
        let p = dir.path().join("h.png");
        buf.save(&p).unwrap();
        let g = load_image(&p).unwrap();
        assert_eq!(g.get(3, 3), 32768.0 / 65535.0);
        assert!((g.get(3, 3) - 0.500_007_63).abs() < 1e-8);
    }

    #[test]
    fn quantization_and_clamping() {
        let dir = tmp();
        let mut g = ImageGrid::filled(8, 8, 0.5).unwrap();
        g.set(0, 0, 1.7);
        g.set(0, 1, -0.3);
        let p = dir.path().join("q.png");
        save_image(&g, &p, ImageFormat::Png8).unwrap();
        let raw = image::open(&p).unwrap().into_luma8().into_raw();
        assert_eq!(raw[0], 255);
        assert_eq!(raw[1], 0);
        assert!(raw[2..].iter().all(|&c| c == 128));
    }

    #[test]
    fn color_and_garbage_inputs_are_rejected() {
        let dir = tmp();
        let rgb: ImageBuffer<image::Rgb<u8>, _> = ImageBuffer::from_raw(8, 8, vec![9u8; 192]).unwrap();
        let p = dir.path().join("rgb.png");
        rgb.save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(MsmError::InvalidImage(_))));
        let q = dir.path().join("junk.png");
        std::fs::write(&q, b"not an image").unwrap();
        assert!(load_image(&q).is_err());
        assert!(load_image(dir.path().join("missing.png")).is_err());
        let mut raw = RAW_MAGIC.to_vec();
        raw.extend_from_slice(&0u32.to_le_bytes());
        raw.extend_from_slice(&8u32.to_le_bytes());
        assert!(matches!(decode_image(&raw), Err(MsmError::InvalidImage(_))));
    }

    #[test]
    fn unwritable_path_errors() {
        let g = ImageGrid::filled(8, 8, 0.1).unwrap();
        assert!(save_image(&g, "/nonexistent-dir/x.png", ImageFormat::Png8).is_err());
    }

    #[test]
    fn raw_layout_is_little_endian_row_major() {
        let g = ImageGrid::from_fn(8, 9, |y, x| (y * 9 + x) as f64 * 0.125).unwrap();
        let b = encode_image(&g, ImageFormat::Rawf32).unwrap();
        assert_eq!(&b[..4], b"MSMF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 9);
        assert_eq!(f32::from_le_bytes(b[12 + 4 * 10..12 + 4 * 11].try_into().unwrap()), 10.0 * 0.125);
    }
}
