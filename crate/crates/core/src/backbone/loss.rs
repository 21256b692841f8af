use msm_tensor::{Graph, ParamSet, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;

/// Architecture of the frozen feature extractor behind the perceptual loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualSpec {
    pub seed: u64,
    /// Output channels of the stride-2 3x3 convolutions, in order.
    pub channels: Vec<usize>,
    pub layer_weights: Vec<f64>,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        Self { seed: 0, channels: vec![8, 16, 32, 32], layer_weights: vec![1.0; 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
    Perceptual(PerceptualSpec),
}

impl LossKind {
    pub fn perceptual() -> Self {
        LossKind::Perceptual(PerceptualSpec::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Perceptual(_) => "perceptual",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "perceptual" => Ok(Self::perceptual()),
            other => Err(MsmError::arg(format!("unknown loss {other:?}"))),
        }
    }
}

/// Randomly initialized, never trained convolutional feature stack.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    spec: PerceptualSpec,
    params: ParamSet,
    layers: Vec<Conv>,
}

impl PerceptualExtractor {
    pub fn new(spec: &PerceptualSpec) -> Result<Self> {
        if spec.channels.is_empty() || spec.channels.len() != spec.layer_weights.len() {
            return Err(MsmError::arg("perceptual spec needs one weight per layer"));
        }
        if spec.layer_weights.iter().any(|w| !(*w >= 0.0)) || spec.layer_weights.iter().sum::<f64>() <= 0.0 {
            return Err(MsmError::arg("perceptual layer weights must be non-negative with positive sum"));
        }
        let mut params = ParamSet::new();
        let mut cin = 1;
        let mut layers = Vec::new();
        for (i, &cout) in spec.channels.iter().enumerate() {
            layers.push(Conv::new(&mut params, &format!("feat{i}"), cin, cout, 3, 2, spec.seed));
            cin = cout;
        }
        Ok(Self { spec: spec.clone(), params, layers })
    }

    pub fn spec(&self) -> &PerceptualSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Writes the frozen weights with the spec as manifest.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let manifest = serde_json::json!({ "format": "msm-perceptual", "spec": self.spec });
        Ok(msm_tensor::checkpoint::save(path, &manifest, &self.params)?)
    }

    /// Loads an extractor saved by [`save`](Self::save); the weights must fit the stored spec.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = msm_tensor::checkpoint::load(path)?;
        if ckpt.manifest["format"] != "msm-perceptual" {
            return Err(MsmError::arg(format!("{} is not a perceptual extractor", path.display())));
        }
        let spec: PerceptualSpec = serde_json::from_value(ckpt.manifest["spec"].clone())?;
        let mut out = Self::new(&spec)?;
        out.params.copy_from(&ckpt.params).map_err(|e| MsmError::arg(format!("extractor weights: {e}")))?;
        Ok(out)
    }

    /// Feature maps after each layer's ReLU.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Vec<Var> {
        let mut h = x;
        self.layers
            .iter()
            .map(|layer| {
                let y = layer.apply(g, w, h);
                h = g.relu(y);
                h
            })
            .collect()
    }

    /// Weighted mean over layers of the mean squared feature difference.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, pred: Var, target: Var) -> Var {
        let w = self.params.bind_frozen(g);
        let fp = self.features(g, &w, pred);
        let ft = self.features(g, &w, target);
        let total: f64 = self.spec.layer_weights.iter().sum();
        let mut acc: Option<Var> = None;
        for ((a, b), &lw) in fp.into_iter().zip(ft).zip(&self.spec.layer_weights) {
            let d = g.sub(a, b);
            let d = g.square(d);
            let m = g.mean(d);
            let m = g.scale(m, T::from_f64_lossy(lw / total));
            acc = Some(match acc {
                Some(s) => g.add(s, m),
                None => m,
            });
        }
        acc.expect("at least one layer")
    }
}

/// Loss function with any frozen state it needs.
#[derive(Clone, Debug)]
pub enum Objective {
    L1,
    L2,
    Perceptual(PerceptualExtractor),
}

impl Objective {
    pub fn new(kind: &LossKind) -> Result<Self> {
        Ok(match kind {
            LossKind::L1 => Objective::L1,
            LossKind::L2 => Objective::L2,
            LossKind::Perceptual(spec) => Objective::Perceptual(PerceptualExtractor::new(spec)?),
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, pred: Var, target: Var) -> Var {
        match self {
            Objective::L1 => {
                let d = g.sub(pred, target);
                let d = g.abs(d);
                g.mean(d)
            }
            Objective::L2 => {
                let d = g.sub(pred, target);
                let d = g.square(d);
                g.mean(d)
            }
            Objective::Perceptual(ex) => ex.loss(g, pred, target),
        }
    }
}

/// Loss between two images, evaluated in double precision.
pub fn compute_loss(pred: &ImageGrid, target: &ImageGrid, loss: &LossKind) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    pred.ensure_finite()?;
    target.ensure_finite()?;
    let obj = Objective::new(loss)?;
    let mut g = Graph::<f64>::new();
    let (h, w) = pred.dims();
    let p = g.input(Tensor::from_vec(&[1, 1, h, w], pred.pixels().to_vec()));
    let t = g.input(Tensor::from_vec(&[1, 1, h, w], target.pixels().to_vec()));
    let l = obj.apply(&mut g, p, t);
    Ok(g.value(l).data()[0])
}
