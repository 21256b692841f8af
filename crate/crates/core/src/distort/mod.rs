//! Parametrized degradations: Gaussian and Rician noise, Gaussian and
//! horizontal motion blur, the synthetic-sodium construction, and ordered
//! distortion ladders.

mod blur;
mod ladder;
mod noise;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use blur::{gaussian_blur, gaussian_kernel, gaussian_sigma_for, motion_blur, MAX_KERNEL_SIZE};
pub use ladder::{build_ladder, write_ladder, DistortionLadder, LadderManifest, Rung};
pub use noise::{
    add_gaussian_noise, add_rician_noise, gaussian_field, sodium_pixel, synthesize_sodium, MAX_NOISE_SIGMA,
};

use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    GaussianNoise,
    RicianNoise,
    GaussianBlur,
    MotionBlur,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] =
        [Self::GaussianNoise, Self::RicianNoise, Self::GaussianBlur, Self::MotionBlur];

    pub fn is_noise(self) -> bool {
        matches!(self, Self::GaussianNoise | Self::RicianNoise)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian-noise",
            Self::RicianNoise => "rician-noise",
            Self::GaussianBlur => "gaussian-blur",
            Self::MotionBlur => "motion-blur",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = MsmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MsmError::arg(format!("unknown distortion kind {s:?}")))
    }
}

/// One degradation: noise std for noise kinds, odd kernel size for blurs.
/// The seed only matters for noise kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind, level, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_noise() {
            if !(0.0..=MAX_NOISE_SIGMA).contains(&self.level) {
                return Err(MsmError::arg(format!("noise level {} outside [0, {MAX_NOISE_SIGMA}]", self.level)));
            }
        } else {
            let s = self.level;
            if s.fract() != 0.0 || s < 1.0 || s > MAX_KERNEL_SIZE as f64 || (s as usize) % 2 == 0 {
                return Err(MsmError::arg(format!("blur size {s} must be an odd integer in [1, {MAX_KERNEL_SIZE}]")));
            }
        }
        Ok(())
    }

    /// True for sigma 0 / kernel size 1.
    pub fn is_identity(&self) -> bool {
        if self.kind.is_noise() {
            self.level == 0.0
        } else {
            self.level == 1.0
        }
    }

    pub fn apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        self.validate()?;
        match self.kind {
            DistortionKind::GaussianNoise => add_gaussian_noise(image, self.level, self.seed),
            DistortionKind::RicianNoise => add_rician_noise(image, self.level, self.seed),
            DistortionKind::GaussianBlur => gaussian_blur(image, self.level as usize),
            DistortionKind::MotionBlur => motion_blur(image, self.level as usize),
        }
    }
}
