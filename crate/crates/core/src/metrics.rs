//! PSNR, SSIM and aggregation.
//!
//! Both metrics read images as floats in `[0, 1]` (u8 samples divided by 255)
//! and never min-max normalize. Arithmetic is double precision.

use thiserror::Error;

use crate::image::Image;
use crate::results::{Aggregates, MetricRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?} (width, height, channels)")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {kernel}x{kernel} SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        kernel: usize,
    },
    #[error("cannot aggregate an empty record list")]
    Empty,
    #[error("nonstandard SSIM parameters require SsimConfig::nonstandard")]
    Nonstandard,
}

fn shape(img: &Image) -> (usize, usize, usize) {
    (img.width(), img.height(), img.channels())
}

fn check_same_shape(x: &Image, y: &Image) -> Result<(), MetricError> {
    if !x.same_shape(y) {
        return Err(MetricError::ShapeMismatch {
            a: shape(x),
            b: shape(y),
        });
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(x: &Image, y: &Image) -> Result<f64, MetricError> {
    check_same_shape(x, y)?;
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let d = x.value_at(i) - y.value_at(i);
        acc += d * d;
    }
    Ok(acc / n as f64)
}

/// `-10 log10(MSE)`; `+inf` when the images are identical.
pub fn psnr(x: &Image, y: &Image) -> Result<f64, MetricError> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// SSIM parameters. [`SsimConfig::default`] is the pinned evaluation setting;
/// any other combination must go through [`SsimConfig::nonstandard`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    kernel_size: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
    data_range: f64,
    nonstandard: bool,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            kernel_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            nonstandard: false,
        }
    }
}

impl SsimConfig {
    pub fn nonstandard(kernel_size: usize, sigma: f64, k1: f64, k2: f64, data_range: f64) -> Self {
        let cfg = Self {
            kernel_size,
            sigma,
            k1,
            k2,
            data_range,
            nonstandard: true,
        };
        Self {
            nonstandard: cfg != Self { nonstandard: true, ..Self::default() },
            ..cfg
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn k1(&self) -> f64 {
        self.k1
    }
    pub fn k2(&self) -> f64 {
        self.k2
    }
    pub fn data_range(&self) -> f64 {
        self.data_range
    }
    pub fn is_nonstandard(&self) -> bool {
        self.nonstandard
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps centred on the middle of the window.
    pub fn gaussian_window(&self) -> Vec<f64> {
        let r = (self.kernel_size as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / sum).collect()
    }
}

/// Separable valid-region filtering of one plane: output is
/// `(h - k + 1) x (w - k + 1)`.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * row[x + t];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * horiz[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    let ch = img.channels();
    (0..img.width() * img.height())
        .map(|i| img.value_at(i * ch + c))
        .collect()
}

/// Mean SSIM over the valid region of every channel.
///
/// Local statistics use a normalized Gaussian window; the SSIM map is only
/// evaluated where the full window fits, giving an `(H-k+1) x (W-k+1)` map per
/// channel. The result is the mean over all map entries and channels.
pub fn ssim(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<f64, MetricError> {
    check_same_shape(x, y)?;
    let (w, h, ch) = shape(x);
    let k = cfg.kernel_size;
    if w < k || h < k || k == 0 {
        return Err(MetricError::TooSmall {
            width: w,
            height: h,
            kernel: k,
        });
    }
    let taps = cfg.gaussian_window();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let px = plane(x, c);
        let py = plane(y, c);
        let xx: Vec<f64> = px.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b).collect();
        let mu_x = filter_valid(&px, w, h, &taps);
        let mu_y = filter_valid(&py, w, h, &taps);
        let e_xx = filter_valid(&xx, w, h, &taps);
        let e_yy = filter_valid(&yy, w, h, &taps);
        let e_xy = filter_valid(&xy, w, h, &taps);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
            total += num / den;
        }
        count += mu_x.len();
    }
    Ok(total / count as f64)
}

/// Arithmetic mean of each metric; `+inf` PSNR entries propagate.
pub fn aggregate(records: &[MetricRecord]) -> Result<Aggregates, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(Aggregates {
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        lpips: mean(|r| r.lpips),
    })
}
