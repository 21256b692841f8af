use msm_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{MsmError, Result};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

/// A 2-D grayscale image with real-valued, row-major pixels.
///
/// The canonical range is `[0, 1]`. Noisy images may leave that range on the
/// analysis path; [`ImageGrid::to_canonical`] clamps and flags the result.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    canonical: bool,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(MsmError::InvalidImage(format!("{height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum")));
        }
        if pixels.len() != height * width {
            return Err(MsmError::InvalidImage(format!(
                "{} pixels for a {height}x{width} grid",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels, canonical: false })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.canonical = false;
        self.pixels[y * self.width + x] = value;
    }

    /// True once the grid has passed through [`ImageGrid::to_canonical`].
    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Clamps to `[0, 1]` and flags the grid canonical.
    pub fn to_canonical(&self) -> Result<Self> {
        self.ensure_finite()?;
        Ok(Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            canonical: true,
        })
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.pixels.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(MsmError::InvalidImage(format!("non-finite pixel at index {i}"))),
            None => Ok(()),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(MsmError::ShapeMismatch { left: self.dims(), right: other.dims() });
        }
        Ok(())
    }

    /// Builds a grid of the same shape from new pixel values.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self { height: self.height, width: self.width, pixels, canonical: false }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_pixels(self.pixels.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(self.with_pixels(self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Sum of absolute horizontal and vertical neighbour differences.
    pub fn total_variation(&self) -> f64 {
        let (h, w) = self.dims();
        let mut tv = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = self.get(y, x);
                if x + 1 < w {
                    tv += (self.get(y, x + 1) - v).abs();
                }
                if y + 1 < h {
                    tv += (self.get(y + 1, x) - v).abs();
                }
            }
        }
        tv
    }

    /// Hex SHA-256 over the shape and the `f64` pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `[1, 1, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.pixels.iter().map(|&v| v as f32).collect())
    }

    /// Stacks same-shaped images into a `[N, 1, H, W]` batch.
    pub fn batch_tensor(images: &[&ImageGrid]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| MsmError::arg("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            first.ensure_same_shape(img)?;
            data.extend(img.pixels.iter().map(|&v| v as f32));
        }
        Ok(Tensor::from_vec(&[images.len(), 1, first.height, first.width], data))
    }

    /// Inverse of [`ImageGrid::batch_tensor`] for single-channel output.
    pub fn from_batch_tensor(t: &Tensor<f32>) -> Result<Vec<ImageGrid>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(MsmError::arg(format!("expected [N, 1, H, W] tensor, got {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        t.data().chunks(h * w).map(|c| ImageGrid::new(h, w, c.iter().map(|&v| v as f64).collect())).collect()
    }

    /// Sub-image `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(MsmError::arg("crop outside image"));
        }
        ImageGrid::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }

    /// Symmetric-reflect padding on the bottom and right edges.
    pub fn pad_reflect_to(&self, h: usize, w: usize) -> Result<Self> {
        if h < self.height || w < self.width {
            return Err(MsmError::arg("padding target smaller than image"));
        }
        ImageGrid::from_fn(h, w, |y, x| self.get(reflect(y as isize, self.height), reflect(x as isize, self.width)))
    }
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`), valid for any offset.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_inconsistent_grids() {
        assert!(ImageGrid::new(7, 8, vec![0.0; 56]).is_err());
        assert!(ImageGrid::new(8, 8, vec![0.0; 63]).is_err());
        assert!(ImageGrid::new(8, 8, vec![0.0; 64]).is_ok());
    }

    #[test]
    fn canonical_clamps_and_rejects_nan() {
        let mut g = ImageGrid::filled(8, 8, 0.5).unwrap();
        g.set(0, 0, -0.2);
        g.set(0, 1, 1.3);
        let c = g.to_canonical().unwrap();
        assert!(c.is_canonical());
        assert_eq!((c.get(0, 0), c.get(0, 1), c.get(0, 2)), (0.0, 1.0, 0.5));
        g.set(1, 1, f64::NAN);
        assert!(g.to_canonical().is_err());
        g.set(1, 1, f64::INFINITY);
        assert!(g.to_canonical().is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let g = ImageGrid::from_fn(9, 10, |y, x| (y * 10 + x) as f64 / 100.0).unwrap();
        let p = g.pad_reflect_to(16, 16).unwrap();
        assert_eq!(p.crop(0, 0, 9, 10).unwrap().pixels(), g.pixels());
        assert_eq!(p.get(9, 0), g.get(8, 0));
    }
}
