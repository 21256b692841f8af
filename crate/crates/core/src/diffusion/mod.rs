//! Desk-scale DDPM. Sampling is stopped early at `stop_t`, so larger stop
//! steps give noisier, content-dependent images.

mod schedule;

use std::path::Path;

use msm_tensor::{checkpoint, Adam, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::{Conv, Linear};
use crate::backbone::{conv_act, dataset_hash, hash_params, uniform_shape, MIN_TRAINING_IMAGES};
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::rng;

pub use schedule::{build_linear_schedule, forward_noise, NoiseSchedule};

const DIFFUSION_FORMAT: &str = "msm-diffusion";

/// Two-level U-net with an additive sinusoidal time embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpsilonConfig {
    pub base_channels: usize,
    pub time_dim: usize,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self { base_channels: 16, time_dim: 32 }
    }
}

impl EpsilonConfig {
    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(MsmError::arg("epsilon net needs positive width and an even time_dim >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv,
    b: Conv,
    time: Linear,
}

impl Block {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, hidden: usize, seed: u64) -> Self {
        Self {
            a: Conv::new(ps, &format!("{name}.a"), cin, cout, 3, 1, seed),
            b: Conv::new(ps, &format!("{name}.b"), cout, cout, 3, 1, seed),
            time: Linear::new(ps, &format!("{name}.time"), hidden, cout, seed),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var, temb: Var) -> Var {
        let h = self.a.apply(g, w, x);
        let shift = self.time.apply(g, w, temb);
        let h = g.add_channel_bias(h, shift);
        let h = g.silu(h);
        conv_act(g, w, &self.b, h)
    }
}

#[derive(Clone, Debug)]
struct EpsNet {
    config: EpsilonConfig,
    time_in: Linear,
    enc: [Block; 2],
    mid: Block,
    up: [Conv; 2],
    dec: [Block; 2],
    head: Conv,
}

impl EpsNet {
    fn build(config: &EpsilonConfig, ps: &mut ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let hidden = 2 * config.time_dim;
        Ok(Self {
            config: config.clone(),
            time_in: Linear::new(ps, "time_in", config.time_dim, hidden, seed),
            enc: [Block::new(ps, "enc0", 1, c, hidden, seed), Block::new(ps, "enc1", c, 2 * c, hidden, seed)],
            mid: Block::new(ps, "mid", 2 * c, 4 * c, hidden, seed),
            up: [Conv::new(ps, "up0", 2 * c, c, 3, 1, seed), Conv::new(ps, "up1", 4 * c, 2 * c, 3, 1, seed)],
            dec: [Block::new(ps, "dec0", 2 * c, c, hidden, seed), Block::new(ps, "dec1", 4 * c, 2 * c, hidden, seed)],
            head: Conv::new(ps, "head", c, 1, 1, 1, seed),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var, steps: &[usize]) -> Var {
        let emb = g.input(sinusoidal_embedding(steps, self.config.time_dim).cast());
        let temb = self.time_in.apply(g, w, emb);
        let temb = g.silu(temb);
        let s0 = self.enc[0].apply(g, w, x, temb);
        let h = g.avg_pool2(s0);
        let s1 = self.enc[1].apply(g, w, h, temb);
        let h = g.avg_pool2(s1);
        let mut h = self.mid.apply(g, w, h, temb);
        for (l, skip) in [(1, s1), (0, s0)] {
            h = g.upsample2(h);
            h = conv_act(g, w, &self.up[l], h);
            h = g.concat_channels(skip, h);
            h = self.dec[l].apply(g, w, h, temb);
        }
        self.head.apply(g, w, h)
    }
}

/// `[sin(t f_k), cos(t f_k)]` with geometric frequencies `f_k`.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp() * t as f64);
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(|v| v as f32));
    }
    Tensor::from_vec(&[steps.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionHyper {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 10, lr: 2e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionManifest {
    pub init_seed: u64,
    pub schedule: Option<NoiseSchedule>,
    pub hyper: Option<DiffusionHyper>,
    pub dataset_hash: Option<String>,
    /// Mean loss of the first and last tenth of the updates.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EpsilonPredictor {
    net: EpsNet,
    params: ParamSet,
    manifest: DiffusionManifest,
}

fn to_signed(v: f64) -> f64 {
    2.0 * v - 1.0
}

fn to_unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

impl EpsilonPredictor {
    pub fn build(config: &EpsilonConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = EpsNet::build(config, &mut params, seed)?;
        Ok(Self { net, params, manifest: DiffusionManifest { init_seed: seed, ..Default::default() } })
    }

    pub fn config(&self) -> &EpsilonConfig {
        &self.net.config
    }

    pub fn manifest(&self) -> &DiffusionManifest {
        &self.manifest
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn weights_hash(&self) -> String {
        hash_params(&self.params)
    }

    /// Noise estimate for a batch of `[-1, 1]` images at per-image steps.
    pub fn predict_noise(&self, x: Tensor<f32>, steps: &[usize]) -> Tensor<f32> {
        let mut g = Graph::<f32>::new();
        let w = self.params.bind_frozen(&mut g);
        let x = g.input(x);
        let y = self.net.forward(&mut g, &w, x, steps);
        g.take_value(y)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = serde_json::json!({
            "format": DIFFUSION_FORMAT,
            "config": self.net.config,
            "training": self.manifest,
        });
        checkpoint::save(path, &manifest, &self.params)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = checkpoint::load(path.as_ref())?;
        if ckpt.manifest.get("format").and_then(|f| f.as_str()) != Some(DIFFUSION_FORMAT) {
            return Err(MsmError::arg(format!("{} is not a diffusion checkpoint", path.as_ref().display())));
        }
        let config: EpsilonConfig = serde_json::from_value(ckpt.manifest["config"].clone())?;
        let manifest: DiffusionManifest = serde_json::from_value(ckpt.manifest["training"].clone())?;
        let mut model = Self::build(&config, manifest.init_seed)?;
        model.params.copy_from(&ckpt.params).map_err(|e| MsmError::arg(format!("checkpoint weights: {e}")))?;
        model.manifest = manifest;
        Ok(model)
    }
}

/// Trains the noise predictor with uniformly drawn steps in `1..=t_max`.
/// Images are mapped to `[-1, 1]` first.
pub fn train_epsilon_predictor(
    clean_set: &[ImageGrid],
    schedule: &NoiseSchedule,
    config: &EpsilonConfig,
    hyper: &DiffusionHyper,
) -> Result<EpsilonPredictor> {
    let (h, w) = uniform_shape(clean_set, MIN_TRAINING_IMAGES)?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(MsmError::arg(format!("{h}x{w} images are not multiples of 4")));
    }
    if hyper.batch_size == 0 || hyper.steps == 0 || !(hyper.lr > 0.0) {
        return Err(MsmError::arg("diffusion training needs positive steps, batch size and learning rate"));
    }
    let mut model = EpsilonPredictor::build(config, hyper.seed)?;
    let signed: Vec<Vec<f64>> = clean_set.iter().map(|i| i.pixels().iter().map(|&v| to_signed(v)).collect()).collect();
    let ab = schedule.alpha_bars();
    let mut opt = Adam::new(&model.params, hyper.lr);
    let mut losses = Vec::with_capacity(hyper.steps);
    let (n, hw) = (hyper.batch_size, h * w);
    for step in 0..hyper.steps {
        let mut r = rng::substream(hyper.seed, step as u64);
        let mut steps = Vec::with_capacity(n);
        let mut xt = Vec::with_capacity(n * hw);
        let mut eps = Vec::with_capacity(n * hw);
        for _ in 0..n {
            let img = &signed[r.gen_range(0..signed.len())];
            let t = r.gen_range(1..=schedule.t_max);
            let (a, s) = (ab[t].sqrt(), (1.0 - ab[t]).sqrt());
            steps.push(t);
            for &v in img {
                let e = rng::normal(&mut r);
                xt.push((a * v + s * e) as f32);
                eps.push(e as f32);
            }
        }
        let mut g = Graph::<f32>::new();
        let wv = model.params.bind(&mut g);
        let x = g.input(Tensor::from_vec(&[n, 1, h, w], xt));
        let target = g.input(Tensor::from_vec(&[n, 1, h, w], eps));
        let pred = model.net.forward(&mut g, &wv, x, &steps);
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(MsmError::arg(format!("diffusion training diverged at step {step}")));
        }
        losses.push(value);
        let mut grads = g.backward(loss);
        let grads: Vec<Option<Tensor<f32>>> = wv.iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut model.params, &grads);
    }
    let tenth = (hyper.steps / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    model.manifest.schedule = Some(schedule.clone());
    model.manifest.hyper = Some(hyper.clone());
    model.manifest.dataset_hash = Some(dataset_hash(clean_set));
    model.manifest.initial_loss = Some(mean(&losses[..tenth]));
    model.manifest.final_loss = Some(mean(&losses[losses.len() - tenth..]));
    Ok(model)
}

/// Ancestral sampling from pure noise at `t_max` down to `stop_t`, returned
/// in `[0, 1]` units (unclamped). Step `t` draws its noise from
/// `substream(seed, t)`, so a trajectory stopped later is a prefix of one
/// stopped earlier.
pub fn reverse_sample_to(
    model: &EpsilonPredictor,
    schedule: &NoiseSchedule,
    stop_t: usize,
    shape: (usize, usize),
    seed: u64,
) -> Result<ImageGrid> {
    Ok(reverse_sample_ladder(model, schedule, &[stop_t], shape, &[seed])?.remove(0).remove(0))
}

/// One trajectory per seed, snapshotted at every requested stop step;
/// `out[i][j]` belongs to `seeds[i]` and `stops[j]`.
pub fn reverse_sample_ladder(
    model: &EpsilonPredictor,
    schedule: &NoiseSchedule,
    stops: &[usize],
    shape: (usize, usize),
    seeds: &[u64],
) -> Result<Vec<Vec<ImageGrid>>> {
    if let Some(&bad) = stops.iter().find(|&&s| s >= schedule.t_max) {
        return Err(MsmError::arg(format!("stop step {bad} must lie below t_max {}", schedule.t_max)));
    }
    if let Some(trained) = &model.manifest.schedule {
        if trained.t_max != schedule.t_max {
            return Err(MsmError::arg("sampling schedule differs from the training schedule"));
        }
    }
    let (h, w) = shape;
    ImageGrid::filled(h, w, 0.0)?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(MsmError::arg(format!("{h}x{w} samples are not multiples of 4")));
    }
    let hw = h * w;
    let n = seeds.len();
    let mut x: Vec<f64> = Vec::with_capacity(n * hw);
    for &seed in seeds {
        let mut r = rng::substream(seed, schedule.t_max as u64 + 1);
        x.extend((0..hw).map(|_| rng::normal(&mut r)));
    }
    let mut out: Vec<Vec<Option<ImageGrid>>> = vec![vec![None; stops.len()]; n];
    let lowest = stops.iter().copied().min().unwrap_or(schedule.t_max);
    let mut snapshot = |t: usize, x: &[f64]| -> Result<()> {
        for (j, _) in stops.iter().enumerate().filter(|(_, &s)| s == t) {
            for (i, row) in out.iter_mut().enumerate() {
                let px = x[i * hw..(i + 1) * hw].iter().map(|&v| to_unit(v)).collect();
                row[j] = Some(ImageGrid::new(h, w, px)?);
            }
        }
        Ok(())
    };
    for t in (lowest + 1..=schedule.t_max).rev() {
        let input = Tensor::from_vec(&[n, 1, h, w], x.iter().map(|&v| v as f32).collect());
        let eps = model.predict_noise(input, &vec![t; n]);
        let (beta, alpha, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
        for (i, &seed) in seeds.iter().enumerate() {
            let mut r = rng::substream(seed, t as u64);
            let xs = &mut x[i * hw..(i + 1) * hw];
            for (v, &e) in xs.iter_mut().zip(&eps.data()[i * hw..(i + 1) * hw]) {
                let mean = (*v - coef * e as f64) / alpha.sqrt();
                *v = mean + sigma * rng::normal(&mut r);
            }
        }
        snapshot(t - 1, &x)?;
    }
    Ok(out.into_iter().map(|row| row.into_iter().map(|i| i.expect("every stop reached")).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::phantom_set;

    fn tiny() -> (EpsilonPredictor, NoiseSchedule) {
        let s = build_linear_schedule(20, 1e-4, 0.02).unwrap();
        (EpsilonPredictor::build(&EpsilonConfig { base_channels: 4, time_dim: 8 }, 2).unwrap(), s)
    }

    #[test]
    fn embedding_shape_and_values() {
        let e = sinusoidal_embedding(&[0, 5], 8);
        assert_eq!(e.shape(), &[2, 8]);
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e.data()[8] - 5f32.sin()).abs() < 1e-6);
    }

    #[test]
    fn default_net_is_about_a_hundred_thousand_parameters() {
        let m = EpsilonPredictor::build(&EpsilonConfig::default(), 0).unwrap();
        assert!((80_000..=160_000).contains(&m.num_parameters()), "{}", m.num_parameters());
    }

    #[test]
    fn ladder_snapshots_match_single_runs() {
        let (m, s) = tiny();
        let ladder = reverse_sample_ladder(&m, &s, &[0, 5, 19], (8, 8), &[3, 4]).unwrap();
        for (i, seed) in [3u64, 4].into_iter().enumerate() {
            for (j, stop) in [0usize, 5, 19].into_iter().enumerate() {
                assert_eq!(ladder[i][j], reverse_sample_to(&m, &s, stop, (8, 8), seed).unwrap());
            }
        }
        assert!(reverse_sample_to(&m, &s, 20, (8, 8), 1).is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_round_trips() {
        let (_, s) = tiny();
        let clean = phantom_set(0, 16, 32).unwrap();
        let cfg = EpsilonConfig { base_channels: 4, time_dim: 8 };
        let hyper = DiffusionHyper { steps: 5, batch_size: 2, lr: 1e-3, seed: 1 };
        let a = train_epsilon_predictor(&clean, &s, &cfg, &hyper).unwrap();
        let b = train_epsilon_predictor(&clean, &s, &cfg, &hyper).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        assert_eq!(a.manifest().final_loss, b.manifest().final_loss);
        assert!(train_epsilon_predictor(&[], &s, &cfg, &hyper).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.ckpt");
        a.save(&path).unwrap();
        let back = EpsilonPredictor::load(&path).unwrap();
        assert_eq!(back.weights_hash(), a.weights_hash());
        assert_eq!(back.manifest(), a.manifest());
    }
}
