use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;

/// PSNR reported when the mean squared error underflows this threshold.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DifferenceMeasure {
    L1,
    L2,
    #[serde(rename = "S_PSNR")]
    SPsnr,
    #[serde(rename = "S_SSIM")]
    SSsim,
}

/// Which direction of a score means a better image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherIsWorse,
    HigherIsBetter,
}

impl Orientation {
    /// True when `a` denotes the better image of the two.
    pub fn prefers(self, a: f64, b: f64) -> bool {
        match self {
            Orientation::HigherIsWorse => a < b,
            Orientation::HigherIsBetter => a > b,
        }
    }
}

impl DifferenceMeasure {
    pub const ALL: [DifferenceMeasure; 4] = [Self::L1, Self::L2, Self::SPsnr, Self::SSsim];

    pub fn orientation(self) -> Orientation {
        match self {
            Self::L1 | Self::L2 => Orientation::HigherIsWorse,
            Self::SPsnr | Self::SSsim => Orientation::HigherIsBetter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::SPsnr => "S_PSNR",
            Self::SSsim => "S_SSIM",
        }
    }
}

impl fmt::Display for DifferenceMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DifferenceMeasure {
    type Err = MsmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| MsmError::arg(format!("unknown measure {s:?}")))
    }
}

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    a.ensure_same_shape(b)?;
    a.ensure_finite()?;
    b.ensure_finite()
}

pub fn mean_abs_error(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn mean_squared_error(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// PSNR with data range 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let mse = mean_squared_error(a, b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn ssim_taps(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> =
        (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over fully contained windows only.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and data range 1. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = ssim_taps(size);
    let (x, y) = (a.pixels(), b.pixels());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = filter_valid(x, h, w, &taps);
    let (my, _, _) = filter_valid(y, h, w, &taps);
    let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
    let (syy, _, _) = filter_valid(&yy, h, w, &taps);
    let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// The difference between two images under `measure`.
pub fn measure_difference(a: &ImageGrid, b: &ImageGrid, measure: DifferenceMeasure) -> Result<f64> {
    match measure {
        DifferenceMeasure::L1 => mean_abs_error(a, b),
        DifferenceMeasure::L2 => mean_squared_error(a, b),
        DifferenceMeasure::SPsnr => psnr(a, b),
        DifferenceMeasure::SSsim => ssim(a, b),
    }
}
