//! Pixel transforms that evaluation protocols depend on: u8 quantization,
//! background blending, area downscaling and half-image cropping.

use thiserror::Error;

use crate::image::{Image, Pixels};

#[derive(Debug, Error, PartialEq)]
pub enum ImageOpError {
    #[error("expected an RGBA image, got {0} channels")]
    NotRgba(usize),
    #[error("downscale factor must be >= 1, got {0}")]
    BadFactor(u32),
    #[error("image width {0} is too small to split in halves")]
    TooNarrow(usize),
}

/// `clamp(round(v * 255), 0, 255)`, rounding half away from zero.
#[inline]
pub fn quantize_value(v: f64) -> u8 {
    let scaled = (v * 255.0).round();
    if scaled.is_nan() || scaled <= 0.0 {
        0
    } else if scaled >= 255.0 {
        255
    } else {
        scaled as u8
    }
}

/// Quantizes to u8. Already-u8 images are returned unchanged.
pub fn quantize_u8(img: &Image) -> Image {
    match img.pixels() {
        Pixels::U8(_) => img.clone(),
        Pixels::Float(d) => Image::from_u8(
            img.width(),
            img.height(),
            img.channels(),
            d.iter().map(|&v| quantize_value(v)).collect(),
        )
        .expect("same shape"),
    }
}

/// Composites straight-alpha RGBA over a solid background:
/// `out = a * rgb + (1 - a) * bg`, evaluated on stored values.
pub fn blend_background(img: &Image, bg: [f64; 3]) -> Result<Image, ImageOpError> {
    if img.channels() != 4 {
        return Err(ImageOpError::NotRgba(img.channels()));
    }
    let n = img.width() * img.height();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let a = img.value_at(i * 4 + 3);
        for (c, b) in bg.iter().enumerate() {
            out.push(a * img.value_at(i * 4 + c) + (1.0 - a) * b);
        }
    }
    Ok(Image::from_float(img.width(), img.height(), 3, out).expect("same shape"))
}

/// Source taps `(index, weight)` for each output sample along one axis.
///
/// Output sample `o` covers the source interval `[o * s, (o + 1) * s)` with
/// `s = src / dst`; each source pixel contributes its overlap length divided
/// by `s`, so the weights of every output sample sum to one.
fn coverage_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let s = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let a = o as f64 * s;
            let b = if o + 1 == dst { src as f64 } else { (o + 1) as f64 * s };
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / s))
                })
                .collect()
        })
        .collect()
}

/// Downscaled output size along one axis: `round(dim / factor)`, at least 1.
pub fn downscaled_dim(dim: usize, factor: u32) -> usize {
    ((dim as f64 / factor as f64).round() as usize).max(1)
}

/// Box-filter downscale with exact fractional coverage weights.
///
/// Arithmetic is double precision; u8 inputs are re-quantized on output.
pub fn downscale_area(img: &Image, factor: u32) -> Result<Image, ImageOpError> {
    if factor < 1 {
        return Err(ImageOpError::BadFactor(factor));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (ow, oh) = (downscaled_dim(w, factor), downscaled_dim(h, factor));
    let wx = coverage_weights(w, ow);
    let wy = coverage_weights(h, oh);
    let src = img.to_f64();

    // Horizontal pass into an (h x ow) buffer, then vertical.
    let mut tmp = vec![0.0; h * ow * ch];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for &(x, wgt) in taps {
                    acc += wgt * src[(y * w + x) * ch + c];
                }
                tmp[(y * ow + ox) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; oh * ow * ch];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for &(y, wgt) in taps {
                    acc += wgt * tmp[(y * ow + ox) * ch + c];
                }
                out[(oy * ow + ox) * ch + c] = acc;
            }
        }
    }
    Ok(match img.pixels() {
        Pixels::U8(_) => Image::from_u8(ow, oh, ch, out.iter().map(|&v| quantize_value(v)).collect()),
        Pixels::Float(_) => Image::from_float(ow, oh, ch, out),
    }
    .expect("shape computed above"))
}

/// Splits columns into a left part of width `ceil(W/2)` and a right part of
/// width `floor(W/2)`.
pub fn crop_halves(img: &Image) -> Result<(Image, Image), ImageOpError> {
    let w = img.width();
    if w < 2 {
        return Err(ImageOpError::TooNarrow(w));
    }
    let split = w.div_ceil(2);
    Ok((img.crop_columns(0, split), img.crop_columns(split, w)))
}
