use msm_tensor::{Graph, ParamSet, Real, Var};
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use crate::error::{MsmError, Result};

/// Encoder-decoder with skip connections. Each level doubles the channel
/// count and halves the resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 32 }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(MsmError::arg(format!("unet depth {} outside 1..=6", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(MsmError::arg("unet base_channels must be positive"));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
struct Level {
    enc: [Conv; 2],
    up: Conv,
    dec: [Conv; 2],
}

#[derive(Clone, Debug)]
pub struct Unet {
    config: UnetConfig,
    levels: Vec<Level>,
    bottleneck: [Conv; 2],
    head: Conv,
}

impl Unet {
    /// Registers the network's parameters in `ps`.
    pub fn build(config: &UnetConfig, in_channels: usize, ps: &mut ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = |l: usize| config.base_channels << l;
        let mut enc = Vec::new();
        for l in 0..config.depth {
            let cin = if l == 0 { in_channels } else { ch(l - 1) };
            enc.push([
                Conv::new(ps, &format!("enc{l}.a"), cin, ch(l), 3, 1, seed),
                Conv::new(ps, &format!("enc{l}.b"), ch(l), ch(l), 3, 1, seed),
            ]);
        }
        let d = config.depth;
        let bottleneck = [
            Conv::new(ps, "mid.a", ch(d - 1), ch(d), 3, 1, seed),
            Conv::new(ps, "mid.b", ch(d), ch(d), 3, 1, seed),
        ];
        let mut levels = Vec::new();
        for (l, enc) in enc.into_iter().enumerate() {
            levels.push(Level {
                enc,
                up: Conv::new(ps, &format!("up{l}"), ch(l + 1), ch(l), 3, 1, seed),
                dec: [
                    Conv::new(ps, &format!("dec{l}.a"), 2 * ch(l), ch(l), 3, 1, seed),
                    Conv::new(ps, &format!("dec{l}.b"), ch(l), ch(l), 3, 1, seed),
                ],
            });
        }
        let head = Conv::new(ps, "head", ch(0), 1, 1, 1, seed);
        Ok(Self { config: config.clone(), levels, bottleneck, head })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// Returns the last decoder feature map (before the output head).
    pub fn features<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let mut h = x;
        let mut skips = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            h = conv_act(g, w, &lvl.enc[0], h);
            h = conv_act(g, w, &lvl.enc[1], h);
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = conv_act(g, w, &self.bottleneck[0], h);
        h = conv_act(g, w, &self.bottleneck[1], h);
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            h = g.upsample2(h);
            h = conv_act(g, w, &lvl.up, h);
            h = g.concat_channels(skip, h);
            h = conv_act(g, w, &lvl.dec[0], h);
            h = conv_act(g, w, &lvl.dec[1], h);
        }
        h
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let h = self.features(g, w, x);
        self.head.apply(g, w, h)
    }
}

pub(crate) fn conv_act<T: Real>(g: &mut Graph<T>, w: &[Var], conv: &Conv, x: Var) -> Var {
    let y = conv.apply(g, w, x);
    g.silu(y)
}
