use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to the i-th parameter, `None`
    /// meaning the parameter did not take part in the loss.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mm), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (*mm / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        let id = p.add("w", &[2], Init::Zeros, 0);
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &[Some(Tensor::from_vec(&[2], vec![3.0, -0.5]))]);
        let w = p.get(id).data();
        assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("w", &[1], Init::Ones, 0);
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..500 {
            let w = p.get(id).data()[0];
            opt.step(&mut p, &[Some(Tensor::from_vec(&[1], vec![2.0 * (w - 3.0)]))]);
        }
        assert!((p.get(id).data()[0] - 3.0).abs() < 1e-2);
    }
}
