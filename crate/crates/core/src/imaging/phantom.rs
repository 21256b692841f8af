use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::grid::ImageGrid;
use crate::error::{MsmError, Result};
use crate::rng;

/// Smallest phantom side; three 2x downsamplings must leave at least 4 px.
pub const MIN_PHANTOM_SIZE: usize = 32;
const SUPERSAMPLE: usize = 4;

/// Parameters of a synthetic MR-like phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    pub n_ellipses: usize,
    pub texture_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { seed: 0, size: 64, n_ellipses: 6, texture_amplitude: 0.05 }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64, size: usize) -> Self {
        Self { seed, size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_PHANTOM_SIZE {
            return Err(MsmError::arg(format!("phantom size {} below {MIN_PHANTOM_SIZE}", self.size)));
        }
        if !(0.0..=0.3).contains(&self.texture_amplitude) {
            return Err(MsmError::arg(format!("texture amplitude {} outside [0, 0.3]", self.texture_amplitude)));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Smooth background gradient, anti-aliased ellipses and a low-frequency
/// sinusoidal texture; a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ImageGrid> {
    spec.validate()?;
    let n = spec.size;
    let s = n as f64;
    let mut r = rng::stream(spec.seed);

    let base = r.gen_range(0.05..0.2);
    let slope = r.gen_range(0.05..0.15);
    let angle = r.gen_range(0.0..2.0 * PI);
    let (gc, gs) = (angle.cos(), angle.sin());

    let ellipses: Vec<Ellipse> = (0..spec.n_ellipses)
        .map(|_| {
            let rot = r.gen_range(0.0..PI);
            Ellipse {
                cy: r.gen_range(0.25..0.75) * s,
                cx: r.gen_range(0.25..0.75) * s,
                ry: r.gen_range(0.06..0.3) * s,
                rx: r.gen_range(0.06..0.3) * s,
                cos: rot.cos(),
                sin: rot.sin(),
                intensity: r.gen_range(0.2..=1.0),
            }
        })
        .collect();

    let fy = r.gen_range(1..=3) as f64;
    let fx = r.gen_range(1..=3) as f64;
    let phase = r.gen_range(0.0..2.0 * PI);

    let mut pixels = Vec::with_capacity(n * n);
    let sub = SUPERSAMPLE as f64;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / s * 2.0 - 1.0, (y as f64 + 0.5) / s * 2.0 - 1.0);
            let mut value = base + slope * (0.5 + 0.35 * (u * gc + v * gs));
            for e in &ellipses {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / sub;
                        let px = x as f64 + (sx as f64 + 0.5) / sub;
                        hits += e.contains(py, px) as usize;
                    }
                }
                let cover = hits as f64 / (sub * sub);
                value = value * (1.0 - cover) + e.intensity * cover;
            }
            value += spec.texture_amplitude * (2.0 * PI * (fx * x as f64 + fy * y as f64) / s + phase).sin();
            // f32-representable so raw float export round-trips exactly
            pixels.push(value.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    ImageGrid::new(n, n, pixels)?.to_canonical()
}

/// `count` phantoms with consecutive seeds starting at `first_seed`.
pub fn phantom_set(first_seed: u64, count: usize, size: usize) -> Result<Vec<ImageGrid>> {
    (0..count as u64).map(|i| generate_phantom(&PhantomSpec::with_seed(first_seed + i, size))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let spec = PhantomSpec::with_seed(1, 64);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    }

    #[test]
    fn seeds_differ_substantially() {
        let a = generate_phantom(&PhantomSpec::with_seed(1, 64)).unwrap();
        let b = generate_phantom(&PhantomSpec::with_seed(2, 64)).unwrap();
        let l1 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(l1 > 0.01, "{l1}");
    }

    #[test]
    fn degenerate_spec_is_a_pure_gradient() {
        let spec = PhantomSpec { seed: 3, size: 32, n_ellipses: 0, texture_amplitude: 0.0 };
        let g = generate_phantom(&spec).unwrap();
        assert!(g.variance() > 0.0);
        assert!(g.is_canonical() && g.in_unit_range());
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(generate_phantom(&PhantomSpec::with_seed(1, 31)).is_err());
        let bad = PhantomSpec { texture_amplitude: 0.5, ..PhantomSpec::default() };
        assert!(generate_phantom(&bad).is_err());
    }

    #[test]
    fn has_edges_and_flat_regions() {
        for seed in 0..5 {
            let g = generate_phantom(&PhantomSpec::with_seed(seed, 64)).unwrap();
            let (mut steep, mut flat) = (0, 0);
            for y in 0..63 {
                for x in 0..63 {
                    let dx = g.get(y, x + 1) - g.get(y, x);
                    let dy = g.get(y + 1, x) - g.get(y, x);
                    let m = dx.hypot(dy);
                    steep += (m > 0.05) as usize;
                    flat += (m < 0.005) as usize;
                }
            }
            assert!(steep > 0 && flat > 0, "seed {seed}: steep {steep} flat {flat}");
        }
    }
}
