use crate::error::{MsmError, Result};
use crate::imaging::{reflect, ImageGrid};

pub const MAX_KERNEL_SIZE: usize = 51;

fn check_kernel(image: &ImageGrid, size: usize) -> Result<()> {
    if size % 2 == 0 || size == 0 || size > MAX_KERNEL_SIZE {
        return Err(MsmError::arg(format!("kernel size must be odd in [1, {MAX_KERNEL_SIZE}], got {size}")));
    }
    if size > 1 && size >= image.height().min(image.width()) {
        return Err(MsmError::arg(format!("kernel size {size} not smaller than image side")));
    }
    image.ensure_finite()
}

/// Gaussian sigma used for a kernel of `size` taps (OpenCV's default rule).
pub fn gaussian_sigma_for(size: usize) -> f64 {
    0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for an odd `size`.
pub fn gaussian_kernel(size: usize) -> Vec<f64> {
    let sigma = gaussian_sigma_for(size);
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn convolve_rows(image: &ImageGrid, taps: &[f64]) -> ImageGrid {
    let (h, w) = image.dims();
    let r = (taps.len() / 2) as isize;
    let src = image.pixels();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let acc: f64 = taps.iter().enumerate().map(|(i, &k)| k * row[reflect(x + i as isize - r, w)]).sum();
            out.push(acc);
        }
    }
    image.with_pixels(out)
}

fn convolve_cols(image: &ImageGrid, taps: &[f64]) -> ImageGrid {
    let (h, w) = image.dims();
    let r = (taps.len() / 2) as isize;
    let src = image.pixels();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for (i, &k) in taps.iter().enumerate() {
            let sy = reflect(y + i as isize - r, h);
            let (dst, srow) = (&mut out[y as usize * w..(y as usize + 1) * w], &src[sy * w..(sy + 1) * w]);
            for (d, &s) in dst.iter_mut().zip(srow) {
                *d += k * s;
            }
        }
    }
    image.with_pixels(out)
}

/// Separable Gaussian blur with symmetric-reflect borders.
pub fn gaussian_blur(image: &ImageGrid, kernel_size: usize) -> Result<ImageGrid> {
    check_kernel(image, kernel_size)?;
    if kernel_size == 1 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel(kernel_size);
    Ok(convolve_cols(&convolve_rows(image, &taps), &taps))
}

/// Horizontal box blur of width `kernel_size`, symmetric-reflect borders.
pub fn motion_blur(image: &ImageGrid, kernel_size: usize) -> Result<ImageGrid> {
    check_kernel(image, kernel_size)?;
    if kernel_size == 1 {
        return Ok(image.clone());
    }
    let taps = vec![1.0 / kernel_size as f64; kernel_size];
    Ok(convolve_rows(image, &taps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_sum_to_one() {
        for s in (1..=51).step_by(2) {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(k.windows(2).take(s / 2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        let g = ImageGrid::filled(16, 16, 0.2).unwrap();
        for s in [0, 2, 53, 17] {
            assert!(gaussian_blur(&g, s).is_err(), "{s}");
            assert!(motion_blur(&g, s).is_err(), "{s}");
        }
    }

    #[test]
    fn unit_kernel_is_identity_and_constants_survive() {
        let g = ImageGrid::from_fn(12, 12, |y, x| ((y * 7 + x * 3) % 5) as f64 / 5.0).unwrap();
        assert_eq!(gaussian_blur(&g, 1).unwrap(), g);
        assert_eq!(motion_blur(&g, 1).unwrap(), g);
        let c = ImageGrid::filled(20, 20, 0.37).unwrap();
        for s in [3, 7, 15] {
            for out in [gaussian_blur(&c, s).unwrap(), motion_blur(&c, s).unwrap()] {
                assert!(out.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn impulse_response_is_outer_product() {
        let mut g = ImageGrid::filled(33, 33, 0.0).unwrap();
        g.set(16, 16, 1.0);
        let out = gaussian_blur(&g, 3).unwrap();
        // s=3 gives sigma 0.8; taps exp(-1/1.28) : 1 : exp(-1/1.28)
        let side = (-1.0f64 / 1.28).exp();
        let centre = 1.0 / (1.0 + 2.0 * side);
        assert!((out.get(16, 16) - centre * centre).abs() < 1e-15);
        assert!((out.get(15, 16) - centre * side * centre).abs() < 1e-15);
    }

    #[test]
    fn motion_impulse_and_stripes() {
        let mut g = ImageGrid::filled(15, 15, 0.0).unwrap();
        g.set(7, 7, 1.0);
        let out = motion_blur(&g, 5).unwrap();
        for x in 0..15 {
            let want = if (5..=9).contains(&x) { 0.2 } else { 0.0 };
            assert!((out.get(7, x) - want).abs() < 1e-15);
            assert_eq!(out.get(6, x), 0.0);
        }
        let stripes = ImageGrid::from_fn(10, 10, |_, x| (x % 2) as f64).unwrap();
        let out = motion_blur(&stripes, 3).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12 || (v - 2.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn blurs_preserve_mean() {
        let g = ImageGrid::from_fn(40, 37, |y, x| (((y * 31 + x * 17) % 23) as f64 / 23.0).powi(2)).unwrap();
        for s in [3, 9, 21, 35] {
            assert!((gaussian_blur(&g, s).unwrap().mean() - g.mean()).abs() < 1e-12, "gauss {s}");
            assert!((motion_blur(&g, s).unwrap().mean() - g.mean()).abs() < 1e-12, "motion {s}");
        }
    }
}
