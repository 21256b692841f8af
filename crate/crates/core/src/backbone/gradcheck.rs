use msm_tensor::{Graph, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{LossKind, Objective};
use super::TrainedBackbone;
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

/// Number of randomly chosen scalar parameters compared.
const SAMPLE: usize = 100;

/// Residual magnitude below which an L1 loss sits on its kink.
const KINK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `None` when the check was excluded.
    pub max_rel_error: Option<f64>,
    pub checked: usize,
    pub excluded: Option<String>,
}

/// Compares backpropagated gradients with central finite differences in
/// double precision on a random subset of parameters.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// roundoff on zero-gradient parameters from dominating.
pub fn check_gradients(
    model: &TrainedBackbone,
    image: &ImageGrid,
    loss: &LossKind,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(MsmError::arg("epsilon must be positive"));
    }
    let m = model.config().size_multiple();
    if image.height() % m != 0 || image.width() % m != 0 {
        return Err(MsmError::arg(format!("input sides must be multiples of {m}")));
    }
    let objective = Objective::new(loss)?;
    let (h, w) = image.dims();
    let x = Tensor::from_vec(&[1, 1, h, w], image.pixels().to_vec());
    let base: Vec<Tensor<f64>> = model.params().tensors().iter().map(|t| t.cast()).collect();

    let eval = |weights: &[Tensor<f64>], want_grad: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = weights.iter().map(|t| g.param(t.clone())).collect();
        let xv = g.input(x.clone());
        let pred = model.forward_raw(&mut g, &vars, xv);
        let residual_min = g.value(pred).data().iter().zip(x.data()).map(|(p, t)| (p - t).abs()).fold(f64::INFINITY, f64::min);
        let l = objective.apply(&mut g, pred, xv);
        let value = g.value(l).data()[0];
        let grads = want_grad.then(|| {
            let mut gr = g.backward(l);
            vars.iter().map(|&v| gr.take(v).expect("parameter gradient")).collect::<Vec<_>>()
        });
        (value, residual_min, grads)
    };

    let (_, residual_min, grads) = eval(&base, true);
    if matches!(loss, LossKind::L1) && residual_min <= KINK {
        return Ok(GradCheckReport {
            max_rel_error: None,
            checked: 0,
            excluded: Some(format!(
                "L1 loss is not differentiable here: prediction equals target at some pixel (|residual| = {residual_min:e})"
            )),
        });
    }
    let grads = grads.expect("requested");

    let sizes: Vec<usize> = base.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::stream(seed);
    let mut worst: f64 = 0.0;
    let mut weights = base.clone();
    let count = SAMPLE.min(total);
    for _ in 0..count {
        let mut flat = r.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let orig = base[ti].data()[flat];
        weights[ti].data_mut()[flat] = orig + epsilon;
        let (lp, _, _) = eval(&weights, false);
        weights[ti].data_mut()[flat] = orig - epsilon;
        let (lm, _, _) = eval(&weights, false);
        weights[ti].data_mut()[flat] = orig;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let analytic = grads[ti].data()[flat];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(GradCheckReport { max_rel_error: Some(worst), checked: count, excluded: None })
}
