use msm_tensor::{Adam, Graph, ParamSet, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::loss::Objective;
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self { batch_size: 10, epochs: 200, lr: 1e-3, lr_decay: 0.99, seed: 0 }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(MsmError::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(MsmError::arg("batch_size must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(MsmError::arg(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Loss trajectory of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Dataset loss before the first update.
    pub initial_loss: f64,
    /// Dataset loss after the last update.
    pub final_loss: f64,
    /// Mean mini-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Anything that maps a `[N, C, H, W]` batch to a `[N, 1, H, W]` batch.
pub trait Forward {
    fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var;
}

/// Produces `(input, target)` batches; the epoch index lets sources draw
/// fresh noise every epoch.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn batch(&self, epoch: usize, items: &[usize]) -> (Tensor<f32>, Tensor<f32>);
}

/// Clean images that are both input and target.
pub struct IdentitySource<'a>(pub &'a [ImageGrid]);

impl BatchSource for IdentitySource<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn batch(&self, _epoch: usize, items: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let t = stack(self.0, items);
        (t.clone(), t)
    }
}

/// Fixed `(input, target)` pairs.
pub struct PairSource<'a> {
    pub inputs: &'a [ImageGrid],
    pub targets: &'a [ImageGrid],
}

impl BatchSource for PairSource<'_> {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, _epoch: usize, items: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        (stack(self.inputs, items), stack(self.targets, items))
    }
}

pub(crate) fn stack(images: &[ImageGrid], items: &[usize]) -> Tensor<f32> {
    let refs: Vec<&ImageGrid> = items.iter().map(|&i| &images[i]).collect();
    ImageGrid::batch_tensor(&refs).expect("uniform training shapes")
}

/// Checks that a training set is non-empty and uniformly shaped.
pub(crate) fn uniform_shape(images: &[ImageGrid], min_count: usize) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| MsmError::arg("empty training set"))?;
    if images.len() < min_count {
        return Err(MsmError::arg(format!("need at least {min_count} training images, got {}", images.len())));
    }
    for img in images {
        first.ensure_same_shape(img)?;
        img.ensure_finite()?;
    }
    Ok(first.dims())
}

/// Mean loss over the whole source at the current weights.
pub fn evaluate<M: Forward>(
    model: &M,
    params: &ParamSet,
    source: &dyn BatchSource,
    objective: &Objective,
    batch_size: usize,
) -> f64 {
    let order: Vec<usize> = (0..source.len()).collect();
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let (x, y) = source.batch(0, chunk);
        let mut g = Graph::<f32>::new();
        let w = params.bind_frozen(&mut g);
        let x = g.input(x);
        let y = g.input(y);
        let p = model.forward(&mut g, &w, x);
        let l = objective.apply(&mut g, p, y);
        total += g.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    total / source.len() as f64
}

/// Mini-batch adaptive-moment training with per-epoch exponential decay.
///
/// Single-threaded and fully determined by `hyper.seed` and the source.
pub fn fit<M: Forward>(
    model: &M,
    params: &mut ParamSet,
    source: &dyn BatchSource,
    objective: &Objective,
    hyper: &TrainingHyper,
) -> Result<TrainLog> {
    hyper.validate()?;
    if source.len() == 0 {
        return Err(MsmError::arg("empty training set"));
    }
    let initial_loss = evaluate(model, params, source, objective, hyper.batch_size);
    let mut opt = Adam::new(params, hyper.lr);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        opt.lr = hyper.lr_at(epoch);
        let mut order: Vec<usize> = (0..source.len()).collect();
        rng::shuffle(&mut order, &mut rng::substream(hyper.seed, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let (x, y) = source.batch(epoch, chunk);
            let mut g = Graph::<f32>::new();
            let w = params.bind(&mut g);
            let x = g.input(x);
            let y = g.input(y);
            let p = model.forward(&mut g, &w, x);
            let l = objective.apply(&mut g, p, y);
            let value = g.value(l).data()[0] as f64;
            if !value.is_finite() {
                return Err(MsmError::arg(format!("training diverged at epoch {epoch}")));
            }
            total += value * chunk.len() as f64;
            let mut grads = g.backward(l);
            let grads: Vec<Option<Tensor<f32>>> = w.iter().map(|&v| grads.take(v)).collect();
            opt.step(params, &grads);
        }
        epoch_losses.push(total / source.len() as f64);
    }
    let final_loss = evaluate(model, params, source, objective, hyper.batch_size);
    Ok(TrainLog { initial_loss, final_loss, epoch_losses })
}

/// Runs `model` on images of one shape in frozen mode, `chunk` at a time.
pub(crate) fn infer<M: Forward>(model: &M, params: &ParamSet, images: &[&ImageGrid], chunk: usize) -> Result<Vec<ImageGrid>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let x = ImageGrid::batch_tensor(part)?;
        let mut g = Graph::<f32>::new();
        let w = params.bind_frozen(&mut g);
        let x = g.input(x);
        let y = model.forward(&mut g, &w, x);
        let y = g.take_value(y);
        out.extend(ImageGrid::from_batch_tensor(&y)?);
    }
    Ok(out)
}
