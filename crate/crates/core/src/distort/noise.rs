use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

pub const MAX_NOISE_SIGMA: f64 = 0.25;

fn check_sigma(sigma: f64) -> Result<()> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(MsmError::arg(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma > MAX_NOISE_SIGMA {
        return Err(MsmError::arg(format!("noise sigma {sigma} above {MAX_NOISE_SIGMA}")));
    }
    Ok(())
}

/// `image + n` with `n ~ N(0, sigma^2)` i.i.d.; not clamped.
pub fn add_gaussian_noise(image: &ImageGrid, sigma: f64, seed: u64) -> Result<ImageGrid> {
    check_sigma(sigma)?;
    image.ensure_finite()?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut r = rng::stream(seed);
    Ok(image.map(|v| v + sigma * rng::normal(&mut r)))
}

/// Magnitude of a two-channel signal with independent Gaussian noise of
/// std `sigma` on each channel: `sqrt((I + n1)^2 + n2^2)`.
pub fn add_rician_noise(image: &ImageGrid, sigma: f64, seed: u64) -> Result<ImageGrid> {
    check_sigma(sigma)?;
    image.ensure_finite()?;
    if sigma == 0.0 {
        return Ok(image.map(f64::abs));
    }
    let mut r = rng::stream(seed);
    Ok(image.map(|v| {
        let re = v + sigma * rng::normal(&mut r);
        let im = sigma * rng::normal(&mut r);
        re.hypot(im)
    }))
}

/// Synthetic sodium image `R = sqrt((S + N/sqrt2)^2 + (N/sqrt2)^2)`,
/// where the noise field `N` is split evenly across both channels.
pub fn synthesize_sodium(signal: &ImageGrid, noise_field: &ImageGrid) -> Result<ImageGrid> {
    signal.ensure_finite()?;
    noise_field.ensure_finite()?;
    signal.zip_map(noise_field, sodium_pixel)
}

pub fn sodium_pixel(s: f64, n: f64) -> f64 {
    let half = n * std::f64::consts::FRAC_1_SQRT_2;
    (s + half).hypot(half)
}

/// Zero-mean Gaussian field with std `sigma`, shaped like `like`.
pub fn gaussian_field(like: &ImageGrid, sigma: f64, seed: u64) -> Result<ImageGrid> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(MsmError::arg(format!("field sigma must be >= 0, got {sigma}")));
    }
    let mut r = rng::stream(seed);
    Ok(like.map(|_| sigma * rng::normal(&mut r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
        let v: Vec<f64> = v.collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt(), v.len())
    }

    #[test]
    fn zero_sigma_is_identity() {
        let g = ImageGrid::from_fn(9, 9, |y, x| (y + x) as f64 / 20.0).unwrap();
        assert_eq!(add_gaussian_noise(&g, 0.0, 4).unwrap().pixels(), g.pixels());
        assert_eq!(add_rician_noise(&g, 0.0, 4).unwrap().pixels(), g.pixels());
    }

    #[test]
    fn negative_or_excessive_sigma_rejected() {
        let g = ImageGrid::filled(8, 8, 0.5).unwrap();
        assert!(add_gaussian_noise(&g, -0.01, 1).is_err());
        assert!(add_rician_noise(&g, -0.01, 1).is_err());
        assert!(add_gaussian_noise(&g, 0.3, 1).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let g = ImageGrid::filled(16, 16, 0.5).unwrap();
        assert_eq!(add_gaussian_noise(&g, 0.1, 9).unwrap(), add_gaussian_noise(&g, 0.1, 9).unwrap());
        assert_ne!(add_gaussian_noise(&g, 0.1, 9).unwrap(), add_gaussian_noise(&g, 0.1, 10).unwrap());
    }

    #[test]
    fn gaussian_residual_moments() {
        let g = ImageGrid::filled(1000, 1000, 0.5).unwrap();
        let out = add_gaussian_noise(&g, 0.1, 2024).unwrap();
        let (m, s, n) = stats(out.pixels().iter().map(|v| v - 0.5));
        assert!((0.0997..=0.1003).contains(&s), "std {s}");
        assert!(m.abs() <= 4.0 * 0.1 / (n as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn rician_on_zero_signal_is_rayleigh() {
        let g = ImageGrid::filled(1000, 1000, 0.0).unwrap();
        let out = add_rician_noise(&g, 0.1, 77).unwrap();
        let (m, _, _) = stats(out.pixels().iter().copied());
        let rayleigh = 0.1 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((m / rayleigh - 1.0).abs() <= 0.005, "mean {m} vs {rayleigh}");
        assert!(out.pixels().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sodium_fixtures() {
        assert!((sodium_pixel(0.3, 0.4) - 0.647_85).abs() < 1e-5);
        let s = ImageGrid::from_fn(8, 8, |y, x| (y * 8 + x) as f64 / 64.0).unwrap();
        let zero = ImageGrid::filled(8, 8, 0.0).unwrap();
        let r = synthesize_sodium(&s, &zero).unwrap();
        for (a, b) in r.pixels().iter().zip(s.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }
        let n = ImageGrid::from_fn(8, 8, |y, x| (y as f64 - x as f64) / 10.0).unwrap();
        let r = synthesize_sodium(&zero, &n).unwrap();
        for (a, b) in r.pixels().iter().zip(n.pixels()) {
            assert!((a - b.abs()).abs() < 1e-12);
        }
        assert!(synthesize_sodium(&s, &ImageGrid::filled(9, 8, 0.0).unwrap()).is_err());
    }
}
