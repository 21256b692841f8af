//! Identity-trained restoration backbones: the model `M` inside the MSM score.

mod gradcheck;
pub mod layers;
mod loss;
mod swin;
mod train;
mod unet;

use std::path::Path;

use msm_tensor::{checkpoint, Graph, ParamSet, Real, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use loss::{compute_loss, LossKind, Objective, PerceptualExtractor, PerceptualSpec};
pub use swin::{SwinConfig, SwinLite};
pub use train::{evaluate, fit, BatchSource, Forward, IdentitySource, PairSource, TrainLog, TrainingHyper};
pub use unet::{Unet, UnetConfig};

pub(crate) use train::{infer, stack, uniform_shape};
pub(crate) use unet::conv_act;

/// Minimum number of clean images for identity training.
pub const MIN_TRAINING_IMAGES: usize = 16;

/// Images per forward pass at inference time.
pub(crate) const INFER_CHUNK: usize = 16;

const BACKBONE_FORMAT: &str = "msm-backbone";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum BackboneConfig {
    Unet(UnetConfig),
    SwinLite(SwinConfig),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Unet(UnetConfig::default())
    }
}

impl BackboneConfig {
    pub fn arch_name(&self) -> &'static str {
        match self {
            BackboneConfig::Unet(_) => "unet",
            BackboneConfig::SwinLite(_) => "swin-lite",
        }
    }

    /// Side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self {
            BackboneConfig::Unet(c) => c.size_multiple(),
            BackboneConfig::SwinLite(c) => c.size_multiple(),
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Unet(Unet),
    Swin(SwinLite),
}

impl Forward for Net {
    fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        match self {
            Net::Unet(n) => n.forward(g, w, x),
            Net::Swin(n) => n.forward(g, w, x),
        }
    }
}

/// Provenance of a backbone's weights; enough to retrain it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub init_seed: u64,
    pub loss: Option<LossKind>,
    pub hyper: Option<TrainingHyper>,
    pub epochs_completed: usize,
    pub dataset_hash: Option<String>,
    pub parent_hash: Option<String>,
    pub log: Option<TrainLog>,
}

/// Anything that maps an image to a same-shaped prediction.
pub trait Predictor: Sync {
    fn predict(&self, image: &ImageGrid) -> Result<ImageGrid>;

    fn predict_many(&self, images: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
        images.iter().map(|i| self.predict(i)).collect()
    }

    /// Content hash identifying the predictor in score tables.
    fn model_hash(&self) -> String;
}

/// Degenerate backbone whose prediction is the input itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityBackbone;

impl Predictor for IdentityBackbone {
    fn predict(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(image.clone())
    }

    fn model_hash(&self) -> String {
        "identity".into()
    }
}

/// The model `M`: architecture, weights and training manifest.
#[derive(Clone, Debug)]
pub struct TrainedBackbone {
    config: BackboneConfig,
    net: Net,
    params: ParamSet,
    manifest: TrainingManifest,
}

/// Seeded, untrained backbone.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<TrainedBackbone> {
    let mut params = ParamSet::new();
    let net = match config {
        BackboneConfig::Unet(c) => Net::Unet(Unet::build(c, 1, &mut params, seed)?),
        BackboneConfig::SwinLite(c) => Net::Swin(SwinLite::build(c, &mut params, seed)?),
    };
    Ok(TrainedBackbone {
        config: config.clone(),
        net,
        params,
        manifest: TrainingManifest { init_seed: seed, ..Default::default() },
    })
}

/// Hex SHA-256 over the ordered parameter names and bit patterns.
pub fn hash_params(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(checkpoint::encode_tensor(t));
    }
    hex::encode(h.finalize())
}

/// Order-sensitive hash of a training set.
pub fn dataset_hash(images: &[ImageGrid]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.content_hash().as_bytes());
    }
    hex::encode(h.finalize())
}

impl TrainedBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn manifest(&self) -> &TrainingManifest {
        &self.manifest
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn weights_hash(&self) -> String {
        hash_params(&self.params)
    }

    /// Reflect-pads to the next valid size, runs the network, crops back.
    pub fn predict(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.predict_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Batched prediction; images may differ in shape.
    pub fn predict_batch(&self, images: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
        predict_padded(&self.net, &self.params, self.config.size_multiple(), images)
    }

    pub(crate) fn forward_raw<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        self.net.forward(g, w, x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = serde_json::json!({
            "format": BACKBONE_FORMAT,
            "config": self.config,
            "training": self.manifest,
        });
        checkpoint::save(path, &manifest, &self.params)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = checkpoint::load(path.as_ref())?;
        if ckpt.manifest.get("format").and_then(|f| f.as_str()) != Some(BACKBONE_FORMAT) {
            return Err(MsmError::arg(format!("{} is not a backbone checkpoint", path.as_ref().display())));
        }
        let config: BackboneConfig = serde_json::from_value(ckpt.manifest["config"].clone())?;
        let manifest: TrainingManifest = serde_json::from_value(ckpt.manifest["training"].clone())?;
        let mut model = build_backbone(&config, manifest.init_seed)?;
        model.params.copy_from(&ckpt.params).map_err(|e| MsmError::arg(format!("checkpoint weights: {e}")))?;
        model.manifest = manifest;
        Ok(model)
    }
}

impl Predictor for TrainedBackbone {
    fn predict(&self, image: &ImageGrid) -> Result<ImageGrid> {
        TrainedBackbone::predict(self, image)
    }

    fn predict_many(&self, images: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
        self.predict_batch(images)
    }

    fn model_hash(&self) -> String {
        self.weights_hash()
    }
}

/// Shared padded inference: groups images by shape, keeps input order.
pub(crate) fn predict_padded<M: Forward>(
    model: &M,
    params: &ParamSet,
    multiple: usize,
    images: &[ImageGrid],
) -> Result<Vec<ImageGrid>> {
    let mut out: Vec<Option<ImageGrid>> = vec![None; images.len()];
    let mut done = vec![false; images.len()];
    for i in 0..images.len() {
        if done[i] {
            continue;
        }
        images[i].ensure_finite()?;
        let dims = images[i].dims();
        let group: Vec<usize> = (i..images.len()).filter(|&j| !done[j] && images[j].dims() == dims).collect();
        let (ph, pw) = (dims.0.div_ceil(multiple) * multiple, dims.1.div_ceil(multiple) * multiple);
        let padded: Vec<ImageGrid> = group
            .iter()
            .map(|&j| if (ph, pw) == dims { Ok(images[j].clone()) } else { images[j].pad_reflect_to(ph, pw) })
            .collect::<Result<_>>()?;
        let refs: Vec<&ImageGrid> = padded.iter().collect();
        let preds = infer(model, params, &refs, INFER_CHUNK)?;
        for (&j, p) in group.iter().zip(preds) {
            let p = if (ph, pw) == dims { p } else { p.crop(0, 0, dims.0, dims.1)? };
            out[j] = Some(p);
            done[j] = true;
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every image predicted")).collect())
}

/// Trains `model` to reproduce `clean_set`.
///
/// With `warm_start`, training starts from the parent's weights (the
/// configurations must match) and the manifest records the parent's hash.
pub fn train_identity(
    model: &TrainedBackbone,
    clean_set: &[ImageGrid],
    loss: &LossKind,
    hyper: &TrainingHyper,
    warm_start: Option<&TrainedBackbone>,
) -> Result<TrainedBackbone> {
    let (h, w) = uniform_shape(clean_set, MIN_TRAINING_IMAGES)?;
    let m = model.config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(MsmError::arg(format!("{h}x{w} training images are not multiples of {m}")));
    }
    let mut out = model.clone();
    if let Some(parent) = warm_start {
        if parent.config != model.config {
            return Err(MsmError::arg("warm start parent has a different architecture"));
        }
        out.params.copy_from(&parent.params).map_err(MsmError::InvalidArgument)?;
        out.manifest.parent_hash = Some(parent.weights_hash());
    }
    let objective = Objective::new(loss)?;
    let log = fit(&out.net, &mut out.params, &IdentitySource(clean_set), &objective, hyper)?;
    out.manifest.loss = Some(loss.clone());
    out.manifest.hyper = Some(hyper.clone());
    out.manifest.epochs_completed = hyper.epochs;
    out.manifest.dataset_hash = Some(dataset_hash(clean_set));
    out.manifest.log = Some(log);
    Ok(out)
}
