//! Pixel buffers.
//!
//! An [`Image`] is a row-major `height × width × channels` buffer stored either
//! as 8-bit integers or as floats in `[0, 1]`. All metric code reads pixels
//! through [`Image::value`], which maps both encodings onto `[0, 1]`.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("buffer length {actual} does not match {width}x{height}x{channels} = {expected}")]
    BadLength {
        width: usize,
        height: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1, 3 or 4)")]
    BadChannels(usize),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {context}: {message}")]
    Decode { context: String, message: String },
    #[error("failed to encode image: {0}")]
    Encode(String),
}

/// Storage encoding of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Float01,
    U8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    Float(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Pixels,
}

fn check_shape(width: usize, height: usize, channels: usize, len: usize) -> Result<(), ImageError> {
    if !matches!(channels, 1 | 3 | 4) {
        return Err(ImageError::BadChannels(channels));
    }
    let expected = width * height * channels;
    if len != expected {
        return Err(ImageError::BadLength {
            width,
            height,
            channels,
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl Image {
    pub fn from_u8(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        check_shape(width, height, channels, data.len())?;
        Ok(Self {
            width,
            height,
            channels,
            pixels: Pixels::U8(data),
        })
    }

    /// Builds a float image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_float(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        check_shape(width, height, channels, data.len())?;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: Pixels::Float(data),
        })
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let channels = color.len();
        let data = (0..width * height)
            .flat_map(|_| color.iter().copied())
            .collect();
        Self::from_float(width, height, channels, data).expect("shape is consistent")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn encoding(&self) -> Encoding {
        match self.pixels {
            Pixels::Float(_) => Encoding::Float01,
            Pixels::U8(_) => Encoding::U8,
        }
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    /// Value of one sample mapped onto `[0, 1]`.
    #[inline]
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.value_at(self.index(x, y, c))
    }

    #[inline]
    pub fn value_at(&self, i: usize) -> f64 {
        match &self.pixels {
            Pixels::Float(d) => d[i],
            Pixels::U8(d) => d[i] as f64 / 255.0,
        }
    }

    /// All samples as floats in `[0, 1]`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.pixels {
            Pixels::Float(d) => d.clone(),
            Pixels::U8(d) => d.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn to_float01(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            pixels: Pixels::Float(self.to_f64()),
        }
    }

    /// Raw u8 samples, if this image is u8-encoded.
    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::U8(d) => Some(d),
            Pixels::Float(_) => None,
        }
    }

    /// Copy of the column range `[x0, x1)`, all rows and channels.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Image {
        assert!(x0 <= x1 && x1 <= self.width, "column range out of bounds");
        let w = x1 - x0;
        let c = self.channels;
        let row_range = |y: usize| (y * self.width + x0) * c..(y * self.width + x1) * c;
        let pixels = match &self.pixels {
            Pixels::Float(d) => {
                Pixels::Float((0..self.height).flat_map(|y| d[row_range(y)].iter().copied()).collect())
            }
            Pixels::U8(d) => {
                Pixels::U8((0..self.height).flat_map(|y| d[row_range(y)].iter().copied()).collect())
            }
        };
        Image {
            width: w,
            height: self.height,
            channels: c,
            pixels,
        }
    }

    /// Decodes PNG or JPEG bytes into a u8 image (grayscale, RGB or RGBA).
    pub fn decode(bytes: &[u8], context: &str) -> Result<Image, ImageError> {
        let decoded = image::load_from_memory(bytes).map_err(|e| ImageError::Decode {
            context: context.to_string(),
            message: e.to_string(),
        })?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let img = match decoded.color().channel_count() {
            1 => Image::from_u8(w, h, 1, decoded.into_luma8().into_raw())?,
            2 | 4 => Image::from_u8(w, h, 4, decoded.into_rgba8().into_raw())?,
            _ => Image::from_u8(w, h, 3, decoded.into_rgb8().into_raw())?,
        };
        Ok(img)
    }

    pub fn load(path: &Path) -> Result<Image, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Image::decode(&bytes, &path.display().to_string())
    }

    /// PNG bytes of a u8 image. Float images must be quantized first.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let data = self
            .as_u8()
            .ok_or_else(|| ImageError::Encode("PNG output requires a u8 image".into()))?;
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            _ => image::ExtendedColorType::Rgba8,
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, ImageError> {
        let data = self
            .as_u8()
            .ok_or_else(|| ImageError::Encode("JPEG output requires a u8 image".into()))?;
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            _ => return Err(ImageError::Encode("JPEG has no alpha channel".into())),
        };
        let mut out = Vec::new();
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
        image::ImageEncoder::write_image(
            encoder,
            data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out)
    }
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Identifier of the pinned decoder stack, recorded in results for provenance.
pub const DECODER_VERSION: &str = "image-0.25.10+png-0.18.1+zune-jpeg-0.5.15";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(matches!(
            Image::from_u8(2, 2, 3, vec![0; 11]),
            Err(ImageError::BadLength { expected: 12, .. })
        ));
        assert!(matches!(
            Image::from_u8(1, 1, 2, vec![0; 2]),
            Err(ImageError::BadChannels(2))
        ));
    }

    #[test]
    fn float_loader_clamps() {
        let img = Image::from_float(2, 1, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.to_f64(), vec![0.0, 1.0]);
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = Image::from_u8(4, 3, 3, data).unwrap();
        let png = img.encode_png().unwrap();
        assert_eq!(Image::decode(&png, "mem").unwrap(), img);
    }

    #[test]
    fn crop_columns_selects_range() {
        let img = Image::from_u8(3, 2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(img.crop_columns(1, 3).as_u8().unwrap(), &[2, 3, 5, 6]);
    }
}
