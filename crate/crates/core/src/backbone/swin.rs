use std::sync::Arc;

use msm_tensor::{Graph, Init, ParamId, ParamSet, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, LayerNorm, Linear};
use crate::error::{MsmError, Result};

/// Shallow windowed-self-attention restorer: patch embedding, alternating
/// unshifted / shifted window-attention blocks, convolutional projection,
/// global residual to the input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwinConfig {
    pub embed_dim: usize,
    pub window_size: usize,
    pub heads: usize,
    pub n_blocks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    2
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self { embed_dim: 32, window_size: 8, heads: 4, n_blocks: 4, mlp_ratio: 2 }
    }
}

impl SwinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(MsmError::arg(format!("heads ({}) must divide embed_dim ({})", self.heads, self.embed_dim)));
        }
        if self.window_size < 2 || self.window_size % 2 != 0 {
            return Err(MsmError::arg(format!("window_size {} must be even and >= 2", self.window_size)));
        }
        if self.n_blocks == 0 || self.mlp_ratio == 0 {
            return Err(MsmError::arg("n_blocks and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        self.window_size
    }
}

/// Large negative logit that removes cross-region attention after a shift.
const MASKED: f64 = -100.0;

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    rel_bias: ParamId,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
}

#[derive(Clone, Debug)]
pub struct SwinLite {
    config: SwinConfig,
    embed: Conv,
    blocks: Vec<Block>,
    norm: LayerNorm,
    body_out: Conv,
    head: Conv,
}

/// Index tables for one `(n, h, w)` geometry.
struct Plan {
    n: usize,
    h: usize,
    w: usize,
    to_tokens: Arc<Vec<u32>>,
    to_image: Arc<Vec<u32>>,
    partition: [Arc<Vec<u32>>; 2],
    merge: [Arc<Vec<u32>>; 2],
    split_heads: [Arc<Vec<u32>>; 3],
    merge_heads: Arc<Vec<u32>>,
    rel_index: Arc<Vec<u32>>,
    shift_mask: Tensor<f64>,
}

impl SwinLite {
    pub fn build(config: &SwinConfig, ps: &mut ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let ws = config.window_size;
        let embed = Conv::new(ps, "embed", 1, c, 3, 1, seed);
        let blocks = (0..config.n_blocks)
            .map(|i| Block {
                norm1: LayerNorm::new(ps, &format!("block{i}.norm1"), c, seed),
                qkv: Linear::new(ps, &format!("block{i}.qkv"), c, 3 * c, seed),
                rel_bias: ps.add(
                    format!("block{i}.rel_bias"),
                    &[(2 * ws - 1) * (2 * ws - 1), config.heads],
                    Init::Normal(0.02),
                    seed,
                ),
                proj: Linear::new(ps, &format!("block{i}.proj"), c, c, seed),
                norm2: LayerNorm::new(ps, &format!("block{i}.norm2"), c, seed),
                fc1: Linear::new(ps, &format!("block{i}.fc1"), c, config.mlp_ratio * c, seed),
                fc2: Linear::new(ps, &format!("block{i}.fc2"), config.mlp_ratio * c, c, seed),
                shifted: i % 2 == 1,
            })
            .collect();
        let norm = LayerNorm::new(ps, "norm", c, seed);
        let body_out = Conv::new(ps, "body_out", c, c, 3, 1, seed);
        let head = Conv::new(ps, "head", c, 1, 3, 1, seed);
        Ok(Self { config: config.clone(), embed, blocks, norm, body_out, head })
    }

    pub fn config(&self) -> &SwinConfig {
        &self.config
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let plan = self.plan(s[0], s[2], s[3]);
        let c = self.config.embed_dim;
        let rows = plan.n * plan.h * plan.w;
        let shallow = self.embed.apply(g, w, x);
        let mut t = g.gather(shallow, plan.to_tokens.clone(), &[rows, c]);
        let mask = Arc::new(plan.shift_mask.cast::<T>());
        for blk in &self.blocks {
            let u = blk.norm1.apply(g, w, t);
            let a = self.attention(g, w, blk, &plan, u, &mask);
            t = g.add(t, a);
            let u = blk.norm2.apply(g, w, t);
            let m = blk.fc1.apply(g, w, u);
            let m = g.gelu(m);
            let m = blk.fc2.apply(g, w, m);
            t = g.add(t, m);
        }
        let t = self.norm.apply(g, w, t);
        let img = g.gather(t, plan.to_image.clone(), &[plan.n, c, plan.h, plan.w]);
        let body = self.body_out.apply(g, w, img);
        let body = g.add(body, shallow);
        let out = self.head.apply(g, w, body);
        g.add(out, x)
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        w: &[Var],
        blk: &Block,
        plan: &Plan,
        u: Var,
        mask: &Arc<Tensor<T>>,
    ) -> Var {
        let c = self.config.embed_dim;
        let heads = self.config.heads;
        let ws = self.config.window_size;
        let tw = ws * ws;
        let d = c / heads;
        let n_win = (plan.h / ws) * (plan.w / ws);
        let rows = plan.n * plan.h * plan.w;
        let bw = plan.n * n_win;
        let sh = blk.shifted as usize;
        let win = g.gather(u, plan.partition[sh].clone(), &[rows, c]);
        let qkv = blk.qkv.apply(g, w, win);
        let q = g.gather(qkv, plan.split_heads[0].clone(), &[bw * heads, tw, d]);
        let k = g.gather(qkv, plan.split_heads[1].clone(), &[bw * heads, tw, d]);
        let v = g.gather(qkv, plan.split_heads[2].clone(), &[bw * heads, tw, d]);
        let bias = g.gather(w[blk.rel_bias.0], plan.rel_index.clone(), &[heads, tw, tw]);
        let mask = blk.shifted.then(|| mask.clone());
        let out = g.attention(q, k, v, bias, mask, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
        let out = g.gather(out, plan.merge_heads.clone(), &[rows, c]);
        let out = blk.proj.apply(g, w, out);
        g.gather(out, plan.merge[sh].clone(), &[rows, c])
    }

    fn plan(&self, n: usize, h: usize, w: usize) -> Plan {
        let c = self.config.embed_dim;
        let ws = self.config.window_size;
        let heads = self.config.heads;
        let d = c / heads;
        let tw = ws * ws;
        let (nwy, nwx) = (h / ws, w / ws);
        let shift = ws / 2;
        let idx = |v: usize| v as u32;

        let mut to_tokens = Vec::with_capacity(n * h * w * c);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        to_tokens.push(idx(((i * c + ch) * h + y) * w + x));
                    }
                }
            }
        }
        let mut to_image = vec![0u32; n * h * w * c];
        for (dst, &src) in to_tokens.iter().enumerate() {
            to_image[src as usize] = idx(dst);
        }

        let partition_for = |s: usize| {
            let mut out = Vec::with_capacity(n * h * w * c);
            for i in 0..n {
                for wy in 0..nwy {
                    for wx in 0..nwx {
                        for ty in 0..ws {
                            for tx in 0..ws {
                                let y = (wy * ws + ty + s) % h;
                                let x = (wx * ws + tx + s) % w;
                                for ch in 0..c {
                                    out.push(idx(((i * h + y) * w + x) * c + ch));
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let inverse = |fwd: &[u32]| {
            let mut inv = vec![0u32; fwd.len()];
            for (dst, &src) in fwd.iter().enumerate() {
                inv[src as usize] = idx(dst);
            }
            inv
        };
        let p0 = partition_for(0);
        let p1 = partition_for(shift);
        let m0 = inverse(&p0);
        let m1 = inverse(&p1);

        let bw = n * nwy * nwx;
        let split = |part: usize| {
            let mut out = Vec::with_capacity(bw * tw * c);
            for b in 0..bw {
                for hd in 0..heads {
                    for t in 0..tw {
                        for j in 0..d {
                            out.push(idx((b * tw + t) * 3 * c + part * c + hd * d + j));
                        }
                    }
                }
            }
            out
        };
        let mut merge_heads = Vec::with_capacity(bw * tw * c);
        for b in 0..bw {
            for t in 0..tw {
                for hd in 0..heads {
                    for j in 0..d {
                        merge_heads.push(idx(((b * heads + hd) * tw + t) * d + j));
                    }
                }
            }
        }

        let span = 2 * ws - 1;
        let mut rel_index = Vec::with_capacity(heads * tw * tw);
        for hd in 0..heads {
            for t1 in 0..tw {
                for t2 in 0..tw {
                    let dy = t1 / ws + ws - 1 - t2 / ws;
                    let dx = t1 % ws + ws - 1 - t2 % ws;
                    rel_index.push(idx((dy * span + dx) * heads + hd));
                }
            }
        }

        let region = |v: usize, size: usize| {
            if v < size - ws {
                0
            } else if v < size - shift {
                1
            } else {
                2
            }
        };
        let mut mask = Vec::with_capacity(nwy * nwx * heads * tw * tw);
        for wy in 0..nwy {
            for wx in 0..nwx {
                let label = |t: usize| region(wy * ws + t / ws, h) * 3 + region(wx * ws + t % ws, w);
                for _ in 0..heads {
                    for t1 in 0..tw {
                        for t2 in 0..tw {
                            mask.push(if label(t1) == label(t2) { 0.0 } else { MASKED });
                        }
                    }
                }
            }
        }

        Plan {
            n,
            h,
            w,
            to_tokens: Arc::new(to_tokens),
            to_image: Arc::new(to_image),
            partition: [Arc::new(p0), Arc::new(p1)],
            merge: [Arc::new(m0), Arc::new(m1)],
            split_heads: [Arc::new(split(0)), Arc::new(split(1)), Arc::new(split(2))],
            merge_heads: Arc::new(merge_heads),
            rel_index: Arc::new(rel_index),
            shift_mask: Tensor::from_vec(&[nwy * nwx * heads, tw, tw], mask),
        }
    }
}
