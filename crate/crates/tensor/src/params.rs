use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He initialization for ReLU-family layers, `std = sqrt(2 / fan_in)`.
    He { fan_in: usize },
}

/// Ordered collection of named `f32` weight tensors.
///
/// Order is the creation order and is stable; graph building refers to
/// parameters by the [`ParamId`] returned at creation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Derives an independent, portable stream for one parameter.
pub fn param_rng(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..index {
        rng.jump();
    }
    rng
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter initialized from `seed` and its position.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => sample_normal(seed, self.names.len(), std, n),
            Init::He { fan_in } => sample_normal(seed, self.names.len(), (2.0 / fan_in as f64).sqrt(), n),
        };
        self.names.push(name);
        self.tensors.push(Tensor::from_vec(shape, data));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// Replaces every tensor with the same-named tensor from `other`;
    /// shapes and names must agree exactly.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(format!("shape {:?} vs {:?}", dst.shape(), src.shape()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Builds a set from pre-existing named tensors (checkpoint loading).
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    /// Registers every parameter in `graph` as a gradient-tracked leaf.
    pub fn bind<T: Real>(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t.cast())).collect()
    }

    /// Registers every parameter as a constant leaf (inference).
    pub fn bind_frozen<T: Real>(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.input(t.cast())).collect()
    }
}

fn sample_normal(seed: u64, index: usize, std: f64, n: usize) -> Vec<f32> {
    let mut rng = param_rng(seed, index);
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
}
