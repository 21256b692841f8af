//! Parameterized building blocks shared by every network in the crate.

use msm_tensor::{Graph, Init, ParamId, ParamSet, Real, Var};

/// Square convolution with bias; `same` padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Self {
        let w = ps.add(format!("{name}.weight"), &[cout, cin, k, k], Init::He { fan_in: cin * k * k }, seed);
        let b = ps.add(format!("{name}.bias"), &[cout], Init::Zeros, seed);
        Self { w, b, stride, pad: k / 2 }
    }

    /// Like [`Conv::new`] with weights drawn at a fixed small scale.
    pub fn with_std(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, std: f64, seed: u64) -> Self {
        let w = ps.add(format!("{name}.weight"), &[cout, cin, k, k], Init::Normal(std), seed);
        let b = ps.add(format!("{name}.bias"), &[cout], Init::Zeros, seed);
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        g.conv2d(x, w[self.w.0], Some(w[self.b.0]), self.stride, self.pad)
    }
}

/// Dense layer on `[rows, in]` token matrices.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    din: usize,
    dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, seed: u64) -> Self {
        let w = ps.add(format!("{name}.weight"), &[1, din, dout], Init::Normal((1.0 / din as f64).sqrt()), seed);
        let b = ps.add(format!("{name}.bias"), &[dout], Init::Zeros, seed);
        Self { w, b, din, dout }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let rows = g.shape(x)[0];
        debug_assert_eq!(g.shape(x)[1], self.din);
        let x3 = g.reshape(x, &[1, rows, self.din]);
        let y = g.matmul(x3, w[self.w.0], false, false);
        let y = g.reshape(y, &[rows, self.dout]);
        g.add_broadcast(y, w[self.b.0])
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    shift: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, seed: u64) -> Self {
        let gain = ps.add(format!("{name}.gain"), &[dim], Init::Ones, seed);
        let shift = ps.add(format!("{name}.shift"), &[dim], Init::Zeros, seed);
        Self { gain, shift }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, w: &[Var], x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let n = g.mul_broadcast(n, w[self.gain.0]);
        g.add_broadcast(n, w[self.shift.0])
    }
}
