use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::folds::SplitSpec;
use crate::backbone::{BackboneConfig, LossKind, PerceptualSpec, TrainingHyper, UnetConfig};
use crate::denoise::{DenoiserArch, NoiseRange};
use crate::diffusion::{DiffusionHyper, EpsilonConfig};
use crate::distort::DistortionKind;
use crate::error::{MsmError, Result};
use crate::imaging::{load_image, phantom_set, ImageGrid};
use crate::metrics::DifferenceMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Sweep,
    Correlate,
    Ablate,
    Pairs,
    Report,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sweep => "sweep",
            Self::Correlate => "correlate",
            Self::Ablate => "ablate",
            Self::Pairs => "pairs",
            Self::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Phantoms with consecutive seeds.
    Phantoms { first_seed: u64, count: usize, size: usize },
    /// Every `.png` / `.msmf` file of a directory, in file-name order.
    Directory { path: PathBuf },
}

impl DatasetSource {
    pub fn phantoms(first_seed: u64, count: usize, size: usize) -> Self {
        Self::Phantoms { first_seed, count, size }
    }

    pub fn load(&self) -> Result<Vec<ImageGrid>> {
        match self {
            Self::Phantoms { first_seed, count, size } => phantom_set(*first_seed, *count, *size),
            Self::Directory { path } => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                    .map_err(|e| MsmError::file(path, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "msmf")))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(MsmError::NotFound(format!("no images in {}", path.display())));
                }
                files.iter().map(load_image).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub kind: DistortionKind,
    pub levels: Vec<f64>,
}

impl LadderSpec {
    /// Sigma 0..0.25 in steps of 0.025, or odd kernels 1..21.
    pub fn standard(kind: DistortionKind) -> Self {
        let levels = if kind.is_noise() {
            (0..=10).map(|i| i as f64 * 0.025).collect()
        } else {
            (0..=10).map(|i| (2 * i + 1) as f64).collect()
        };
        Self { kind, levels }
    }
}

/// Identity-training recipe for one backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecipe {
    pub config: BackboneConfig,
    pub loss: LossKind,
    pub hyper: TrainingHyper,
    /// Use these weights instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for BackboneRecipe {
    fn default() -> Self {
        Self {
            config: BackboneConfig::Unet(UnetConfig { depth: 3, base_channels: 8 }),
            loss: LossKind::Perceptual(PerceptualSpec::default()),
            hyper: TrainingHyper { epochs: 30, lr_decay: 0.98, ..TrainingHyper::default() },
            checkpoint: None,
        }
    }
}

/// Early-stopped diffusion samples scored as one more ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLadderSpec {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub train_set: DatasetSource,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub model: EpsilonConfig,
    pub hyper: DiffusionHyper,
    pub stops: Vec<usize>,
    pub samples_per_stop: usize,
}

impl Default for DiffusionLadderSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            train_set: DatasetSource::phantoms(0, 64, 32),
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            model: EpsilonConfig::default(),
            hyper: DiffusionHyper::default(),
            stops: vec![0, 40, 80, 120, 160],
            samples_per_stop: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub arch: DenoiserArch,
    pub train_sigmas: Vec<f64>,
    pub test_sigmas: Vec<f64>,
    pub hyper: TrainingHyper,
    pub test_set: DatasetSource,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            arch: DenoiserArch::unet(),
            train_sigmas: vec![0.0, 0.05, 0.1],
            test_sigmas: (0..=10).map(|i| i as f64 * 0.025).collect(),
            hyper: TrainingHyper { epochs: 30, lr_decay: 0.98, ..TrainingHyper::default() },
            test_set: DatasetSource::phantoms(10_000, 16, 64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub archs: Vec<BackboneConfig>,
    pub losses: Vec<LossKind>,
    pub measures: Vec<DifferenceMeasure>,
}

/// Denoised variants of noisy slices, enumerated into blinded pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairsSpec {
    /// Field std of the synthetic sodium slices that get denoised.
    pub noise_sigma: f64,
    pub slices: DatasetSource,
    pub denoisers: Vec<DenoiserArch>,
    pub denoiser_hyper: TrainingHyper,
    pub training_noise: NoiseRange,
    /// Also offer the noisy input itself as a variant.
    #[serde(default = "yes")]
    pub include_noisy: bool,
}

fn yes() -> bool {
    true
}

impl Default for PairsSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            slices: DatasetSource::phantoms(20_000, 2, 64),
            denoisers: vec![DenoiserArch::Median { window: 3 }, DenoiserArch::unet(), DenoiserArch::dncnn()],
            denoiser_hyper: TrainingHyper { epochs: 20, lr_decay: 0.98, ..TrainingHyper::default() },
            training_noise: NoiseRange::default(),
            include_noisy: true,
        }
    }
}

/// Inputs for a kappa report over a finished session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub session: PathBuf,
    pub ratings: PathBuf,
    /// Score CSVs written by `score`, one metric per file.
    #[serde(default)]
    pub scores: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Images the experiment evaluates.
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSource,
    /// Backbone training images. Without it every fold trains its own
    /// backbone on the remaining folds.
    #[serde(default)]
    pub train_set: Option<DatasetSource>,
    #[serde(default = "default_ladders")]
    pub ladders: Vec<LadderSpec>,
    #[serde(default)]
    pub backbone: BackboneRecipe,
    #[serde(default = "default_measures")]
    pub measures: Vec<DifferenceMeasure>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub diffusion: Option<DiffusionLadderSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub ablation: Option<AblationGrid>,
    #[serde(default)]
    pub pairs: Option<PairsSpec>,
    #[serde(default)]
    pub report: Option<ReportSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_dataset() -> DatasetSource {
    DatasetSource::phantoms(10_000, 100, 64)
}

fn default_ladders() -> Vec<LadderSpec> {
    DistortionKind::ALL.into_iter().map(LadderSpec::standard).collect()
}

fn default_measures() -> Vec<DifferenceMeasure> {
    vec![DifferenceMeasure::L2]
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            dataset: default_dataset(),
            train_set: Some(DatasetSource::phantoms(0, 64, 64)),
            ladders: default_ladders(),
            backbone: BackboneRecipe::default(),
            measures: default_measures(),
            split: SplitSpec::default(),
            diffusion: None,
            sweep: None,
            ablation: None,
            pairs: None,
            report: None,
            out: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsmError::file(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(MsmError::arg(format!("{} experiment needs a \"{what}\" section", self.kind.as_str())))
            }
        };
        match self.kind {
            ExperimentKind::Sweep => need(self.sweep.is_some(), "sweep"),
            ExperimentKind::Ablate => need(self.ablation.is_some(), "ablation"),
            ExperimentKind::Pairs => need(self.pairs.is_some(), "pairs"),
            ExperimentKind::Report => need(self.report.is_some(), "report"),
            ExperimentKind::Correlate => {
                if self.ladders.is_empty() && self.diffusion.is_none() {
                    return Err(MsmError::arg("correlate experiment has no ladders"));
                }
                if self.measures.is_empty() {
                    return Err(MsmError::arg("correlate experiment has no measures"));
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_gets_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"kind": "correlate", "seed": 3}"#).unwrap();
        assert_eq!(c.ladders.len(), 4);
        assert_eq!(c.measures, vec![DifferenceMeasure::L2]);
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_is_mandatory_and_sections_checked() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kind": "sweep"}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"kind": "sweep", "seed": 1}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn standard_ladders() {
        let n = LadderSpec::standard(DistortionKind::RicianNoise);
        assert_eq!(n.levels.len(), 11);
        assert!((n.levels[10] - 0.25).abs() < 1e-12);
        assert_eq!(LadderSpec::standard(DistortionKind::MotionBlur).levels[10], 21.0);
    }
}
