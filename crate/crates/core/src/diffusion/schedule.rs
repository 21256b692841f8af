use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

/// Linear variance schedule. Step indices run `1..=t_max`; index 0 is the
/// clean image with `alpha_bar = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
struct ScheduleSpec {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = MsmError;

    fn try_from(s: ScheduleSpec) -> Result<Self> {
        build_linear_schedule(s.t_max, s.beta_start, s.beta_end)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        Self { t_max: s.t_max, beta_start: s.beta_start, beta_end: s.beta_end }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_linear_schedule(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

pub fn build_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(MsmError::arg(format!("t_max must be >= 2, got {t_max}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(MsmError::arg(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_max + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
    }
    Ok(NoiseSchedule { t_max, beta_start, beta_end, betas, alpha_bars })
}

impl NoiseSchedule {
    /// `beta_t` for `t` in `1..=t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product of `alpha` up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(MsmError::arg(format!("timestep {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` on the raw pixel
/// values, `eps` standard normal.
pub fn forward_noise(image: &ImageGrid, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<ImageGrid> {
    schedule.check_t(t)?;
    image.ensure_finite()?;
    if t == 0 {
        return Ok(image.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut r = rng::stream(seed);
    Ok(image.map(|v| a * v + s * rng::normal(&mut r)))
}
