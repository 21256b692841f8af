//! Competing denoisers whose outputs are ranked in pairwise studies: a median
//! filter and two supervised CNNs.

mod median;

use std::path::Path;

use msm_tensor::{checkpoint, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::Conv;
use crate::backbone::{
    dataset_hash, fit, hash_params, predict_padded, stack, uniform_shape, BatchSource, Forward, LossKind,
    Objective, PairSource, TrainLog, TrainingHyper, Unet, UnetConfig, MIN_TRAINING_IMAGES,
};
use crate::distort::{add_gaussian_noise, gaussian_field, synthesize_sodium, MAX_NOISE_SIGMA};
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

pub use median::median_filter;

const DENOISER_FORMAT: &str = "msm-denoiser";

/// Plain convolutional stack that predicts the noise and subtracts it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DncnnConfig {
    pub layers: usize,
    pub channels: usize,
}

impl Default for DncnnConfig {
    fn default() -> Self {
        Self { layers: 8, channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum DenoiserArch {
    Median { window: usize },
    UnetDenoiser(UnetConfig),
    DncnnLite(DncnnConfig),
}

impl DenoiserArch {
    pub fn unet() -> Self {
        DenoiserArch::UnetDenoiser(UnetConfig { depth: 3, base_channels: 8 })
    }

    pub fn dncnn() -> Self {
        DenoiserArch::DncnnLite(DncnnConfig::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            DenoiserArch::Median { .. } => "median",
            DenoiserArch::UnetDenoiser(_) => "unet-denoiser",
            DenoiserArch::DncnnLite(_) => "dncnn-lite",
        }
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, DenoiserArch::Median { .. })
    }

    fn size_multiple(&self) -> usize {
        match self {
            DenoiserArch::UnetDenoiser(c) => c.size_multiple(),
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Dncnn {
    convs: Vec<Conv>,
}

impl Dncnn {
    fn build(config: &DncnnConfig, ps: &mut ParamSet, seed: u64) -> Result<Self> {
        if config.layers < 2 || config.channels == 0 {
            return Err(MsmError::arg(format!(
                "dncnn needs >= 2 layers and positive width, got {} x {}",
                config.layers, config.channels
            )));
        }
        let c = config.channels;
        let convs = (0..config.layers)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c };
                let cout = if i + 1 == config.layers { 1 } else { c };
                Conv::new(ps, &format!("conv{i}"), cin, cout, 3, 1, seed)
            })
            .collect();
        Ok(Self { convs })
    }
}

impl Forward for Dncnn {
    fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.apply(g, w, h);
            if i < last {
                h = g.relu(h);
            }
        }
        g.sub(x, h)
    }
}

#[derive(Clone, Debug)]
enum Net {
    Unet(Unet),
    Dncnn(Dncnn),
}

impl Forward for Net {
    fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        match self {
            Net::Unet(n) => n.forward(g, w, x),
            Net::Dncnn(n) => n.forward(g, w, x),
        }
    }
}

/// How the noisy half of each training pair was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainingNoise {
    /// Pairs supplied by the caller.
    #[default]
    Given,
    /// Synthetic sodium pairs, one field std per pair.
    Sodium { field_sigmas: Vec<f64> },
    /// Additive Gaussian noise at a fixed std, redrawn every epoch.
    FreshGaussian { sigma: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserManifest {
    pub init_seed: u64,
    pub hyper: Option<TrainingHyper>,
    pub dataset_hash: Option<String>,
    pub noise: TrainingNoise,
    pub log: Option<TrainLog>,
}

#[derive(Clone, Debug)]
struct Learned {
    net: Net,
    params: ParamSet,
    manifest: DenoiserManifest,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    arch: DenoiserArch,
    learned: Option<Learned>,
}

impl DenoiserModel {
    pub fn median(window: usize) -> Result<Self> {
        if window % 2 == 0 {
            return Err(MsmError::arg(format!("median window must be odd, got {window}")));
        }
        Ok(Self { arch: DenoiserArch::Median { window }, learned: None })
    }

    /// Median models are ready to use; learned ones start from a seeded
    /// initialization.
    pub fn build(arch: &DenoiserArch, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = match arch {
            DenoiserArch::Median { window } => return Self::median(*window),
            DenoiserArch::UnetDenoiser(c) => Net::Unet(Unet::build(c, 1, &mut params, seed)?),
            DenoiserArch::DncnnLite(c) => Net::Dncnn(Dncnn::build(c, &mut params, seed)?),
        };
        let manifest = DenoiserManifest { init_seed: seed, ..Default::default() };
        Ok(Self { arch: arch.clone(), learned: Some(Learned { net, params, manifest }) })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn manifest(&self) -> Option<&DenoiserManifest> {
        self.learned.as_ref().map(|l| &l.manifest)
    }

    /// Weight hash for learned models, the window for the median filter.
    pub fn model_hash(&self) -> String {
        match (&self.arch, &self.learned) {
            (_, Some(l)) => hash_params(&l.params),
            (DenoiserArch::Median { window }, None) => format!("median-{window}"),
            _ => unreachable!("learned architectures always carry weights"),
        }
    }

    pub fn apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.apply_many(std::slice::from_ref(image))?.remove(0))
    }

    pub fn apply_many(&self, images: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
        match (&self.arch, &self.learned) {
            (DenoiserArch::Median { window }, _) => images.iter().map(|i| median_filter(i, *window)).collect(),
            (arch, Some(l)) => predict_padded(&l.net, &l.params, arch.size_multiple(), images),
            _ => unreachable!("learned architectures always carry weights"),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = serde_json::json!({
            "format": DENOISER_FORMAT,
            "config": self.arch,
            "training": self.manifest(),
        });
        let empty = ParamSet::new();
        let params = self.learned.as_ref().map_or(&empty, |l| &l.params);
        checkpoint::save(path, &manifest, params)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = checkpoint::load(path.as_ref())?;
        if ckpt.manifest.get("format").and_then(|f| f.as_str()) != Some(DENOISER_FORMAT) {
            return Err(MsmError::arg(format!("{} is not a denoiser checkpoint", path.as_ref().display())));
        }
        let arch: DenoiserArch = serde_json::from_value(ckpt.manifest["config"].clone())?;
        let Some(training) = ckpt.manifest.get("training").filter(|t| !t.is_null()) else {
            return Self::build(&arch, 0);
        };
        let manifest: DenoiserManifest = serde_json::from_value(training.clone())?;
        let mut model = Self::build(&arch, manifest.init_seed)?;
        let l = model.learned.as_mut().ok_or_else(|| MsmError::arg("median checkpoint carries training data"))?;
        l.params.copy_from(&ckpt.params).map_err(|e| MsmError::arg(format!("checkpoint weights: {e}")))?;
        l.manifest = manifest;
        Ok(model)
    }
}

/// Runs `model` on `image`; output has the input's shape.
pub fn apply_denoiser(model: &DenoiserModel, image: &ImageGrid) -> Result<ImageGrid> {
    model.apply(image)
}

/// Range of per-pair noise field stds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRange {
    pub min: f64,
    pub max: f64,
}

impl Default for NoiseRange {
    fn default() -> Self {
        Self { min: 0.05, max: 0.2 }
    }
}

impl NoiseRange {
    pub fn fixed(sigma: f64) -> Self {
        Self { min: sigma, max: sigma }
    }

    fn sample(&self, r: &mut rng::Rng) -> Result<f64> {
        if !(self.min >= 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(MsmError::arg(format!("bad noise range [{}, {}]", self.min, self.max)));
        }
        Ok(if self.min == self.max { self.min } else { r.gen_range(self.min..=self.max) })
    }
}

/// Noisy/clean training pairs with the field std used for each.
#[derive(Clone, Debug, PartialEq)]
pub struct SodiumPairs {
    pub noisy: Vec<ImageGrid>,
    pub clean: Vec<ImageGrid>,
    pub field_sigmas: Vec<f64>,
}

/// Synthetic sodium images from clean signals, one Gaussian noise field
/// per image with std drawn from `range`.
pub fn sodium_pairs(clean: &[ImageGrid], range: NoiseRange, seed: u64) -> Result<SodiumPairs> {
    let mut r = rng::substream(seed, u64::MAX);
    let mut out = SodiumPairs { noisy: Vec::new(), clean: clean.to_vec(), field_sigmas: Vec::new() };
    for (i, s) in clean.iter().enumerate() {
        let sigma = range.sample(&mut r)?;
        let field = gaussian_field(s, sigma, rng::substream(seed, i as u64).gen())?;
        out.noisy.push(synthesize_sodium(s, &field)?);
        out.field_sigmas.push(sigma);
    }
    Ok(out)
}

fn check_learned(arch: &DenoiserArch, images: &[ImageGrid]) -> Result<()> {
    if !arch.is_learned() {
        return Err(MsmError::arg("the median filter has nothing to train"));
    }
    let (h, w) = uniform_shape(images, MIN_TRAINING_IMAGES)?;
    let m = arch.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(MsmError::arg(format!("{h}x{w} training images are not multiples of {m}")));
    }
    Ok(())
}

fn train_with(
    arch: &DenoiserArch,
    source: &dyn BatchSource,
    targets: &[ImageGrid],
    noise: TrainingNoise,
    hyper: &TrainingHyper,
) -> Result<DenoiserModel> {
    let mut model = DenoiserModel::build(arch, hyper.seed)?;
    let l = model.learned.as_mut().expect("learned architecture");
    let objective = Objective::new(&LossKind::L2)?;
    let log = fit(&l.net, &mut l.params, source, &objective, hyper)?;
    l.manifest.hyper = Some(hyper.clone());
    l.manifest.dataset_hash = Some(dataset_hash(targets));
    l.manifest.noise = noise;
    l.manifest.log = Some(log);
    Ok(model)
}

/// Supervised MSE training on `(noisy, clean)` pairs. Initialization and
/// shuffling both follow `hyper.seed`.
pub fn train_supervised_denoiser(
    arch: &DenoiserArch,
    pairs: &[(ImageGrid, ImageGrid)],
    hyper: &TrainingHyper,
) -> Result<DenoiserModel> {
    let (noisy, clean): (Vec<ImageGrid>, Vec<ImageGrid>) = pairs.iter().cloned().unzip();
    train_pairs(arch, &noisy, &clean, TrainingNoise::Given, hyper)
}

/// [`train_supervised_denoiser`] on sodium pairs; the per-pair field stds
/// are kept in the manifest.
pub fn train_sodium_denoiser(arch: &DenoiserArch, pairs: &SodiumPairs, hyper: &TrainingHyper) -> Result<DenoiserModel> {
    let noise = TrainingNoise::Sodium { field_sigmas: pairs.field_sigmas.clone() };
    train_pairs(arch, &pairs.noisy, &pairs.clean, noise, hyper)
}

fn train_pairs(
    arch: &DenoiserArch,
    noisy: &[ImageGrid],
    clean: &[ImageGrid],
    noise: TrainingNoise,
    hyper: &TrainingHyper,
) -> Result<DenoiserModel> {
    if noisy.is_empty() {
        return Err(MsmError::arg("no training pairs"));
    }
    check_learned(arch, clean)?;
    for (n, c) in noisy.iter().zip(clean) {
        n.ensure_same_shape(c)?;
        n.ensure_finite()?;
    }
    train_with(arch, &PairSource { inputs: noisy, targets: clean }, clean, noise, hyper)
}

/// Clean images with Gaussian noise of one std, redrawn for every epoch.
pub struct FreshNoiseSource<'a> {
    pub clean: &'a [ImageGrid],
    pub sigma: f64,
    pub seed: u64,
}

impl BatchSource for FreshNoiseSource<'_> {
    fn len(&self) -> usize {
        self.clean.len()
    }

    fn batch(&self, epoch: usize, items: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let noisy: Vec<ImageGrid> = items
            .iter()
            .map(|&i| {
                let seed = rng::substream(self.seed ^ epoch as u64, i as u64).gen();
                add_gaussian_noise(&self.clean[i], self.sigma, seed).expect("validated sigma")
            })
            .collect();
        let all: Vec<usize> = (0..noisy.len()).collect();
        (stack(&noisy, &all), stack(self.clean, items))
    }
}

/// Trains a denoiser for one fixed additive Gaussian noise level.
pub fn train_fixed_noise_denoiser(
    arch: &DenoiserArch,
    clean: &[ImageGrid],
    sigma: f64,
    hyper: &TrainingHyper,
) -> Result<DenoiserModel> {
    if !(0.0..=MAX_NOISE_SIGMA).contains(&sigma) {
        return Err(MsmError::arg(format!("noise sigma {sigma} outside [0, {MAX_NOISE_SIGMA}]")));
    }
    check_learned(arch, clean)?;
    let source = FreshNoiseSource { clean, sigma, seed: hyper.seed };
    train_with(arch, &source, clean, TrainingNoise::FreshGaussian { sigma }, hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::phantom_set;
    use crate::metrics::psnr;

    fn tiny_hyper(epochs: usize) -> TrainingHyper {
        TrainingHyper { batch_size: 8, epochs, lr: 2e-3, lr_decay: 1.0, seed: 3 }
    }

    #[test]
    fn dncnn_at_zero_weights_is_identity() {
        let mut m = DenoiserModel::build(&DenoiserArch::dncnn(), 1).unwrap();
        for t in m.learned.as_mut().unwrap().params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let img = ImageGrid::from_fn(12, 10, |y, x| (y * 10 + x) as f64 / 120.0).unwrap();
        let out = m.apply(&img).unwrap();
        assert_eq!(out.dims(), img.dims());
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sodium_pairs_record_levels_in_range() {
        let clean = phantom_set(0, 6, 32).unwrap();
        let p = sodium_pairs(&clean, NoiseRange::default(), 9).unwrap();
        assert_eq!(p.noisy.len(), 6);
        assert!(p.field_sigmas.iter().all(|s| (0.05..=0.2).contains(s)));
        assert_eq!(p, sodium_pairs(&clean, NoiseRange::default(), 9).unwrap());
        let fixed = sodium_pairs(&clean, NoiseRange::fixed(0.1), 9).unwrap();
        assert!(fixed.field_sigmas.iter().all(|&s| s == 0.1));
    }

    #[test]
    fn fresh_noise_changes_per_epoch_but_not_per_call() {
        let clean = phantom_set(0, 2, 32).unwrap();
        let src = FreshNoiseSource { clean: &clean, sigma: 0.1, seed: 4 };
        let (a, _) = src.batch(0, &[1]);
        let (b, _) = src.batch(0, &[1]);
        let (c, _) = src.batch(1, &[1]);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn median_cannot_be_trained_and_pairs_are_required() {
        let clean = phantom_set(0, 16, 32).unwrap();
        let median = DenoiserArch::Median { window: 3 };
        assert!(train_fixed_noise_denoiser(&median, &clean, 0.1, &tiny_hyper(1)).is_err());
        assert!(train_supervised_denoiser(&DenoiserArch::dncnn(), &[], &tiny_hyper(1)).is_err());
        assert!(DenoiserModel::median(4).is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_round_trips() {
        let clean = phantom_set(0, 16, 32).unwrap();
        let pairs = sodium_pairs(&clean, NoiseRange::fixed(0.1), 1).unwrap();
        let arch = DenoiserArch::DncnnLite(DncnnConfig { layers: 3, channels: 4 });
        let a = train_sodium_denoiser(&arch, &pairs, &tiny_hyper(2)).unwrap();
        let b = train_sodium_denoiser(&arch, &pairs, &tiny_hyper(2)).unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
        let log = a.manifest().unwrap().log.as_ref().unwrap();
        assert!(log.final_loss < log.initial_loss);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        a.save(&path).unwrap();
        let back = DenoiserModel::load(&path).unwrap();
        assert_eq!(back.model_hash(), a.model_hash());
        assert_eq!(back.manifest(), a.manifest());
        assert_eq!(back.apply(&pairs.noisy[0]).unwrap(), a.apply(&pairs.noisy[0]).unwrap());

        let m = DenoiserModel::median(3).unwrap();
        m.save(&path).unwrap();
        let back = DenoiserModel::load(&path).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert!(psnr(&clean[0], &back.apply(&pairs.noisy[0]).unwrap()).unwrap() > 0.0);
    }
}
