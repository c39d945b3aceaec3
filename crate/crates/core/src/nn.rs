//! Small parameter containers shared by the codec, baselines and denoiser.

use ndtape::{Head, Tape, Tensor, TensorContainer, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NimbusError, Result};

/// He-normal initialized tensor.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Fully connected stack with GELU between layers and an optional softplus head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub softplus_head: bool,
}

pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    softplus_head: bool,
}

impl Mlp {
    pub fn new(sizes: &[usize], softplus_head: bool, head_bias: f32, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let last = i + 2 == sizes.len();
            let mut weight = he_normal(&[w[0], w[1]], w[0], rng);
            if last {
                weight = weight.map(|x| x * 0.5);
            }
            weights.push(weight);
            biases.push(Tensor::full(&[w[1]], if last { head_bias } else { 0.0 }));
        }
        Self {
            weights,
            biases,
            softplus_head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|t| t.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn on_tape(&self, tape: &Tape, requires_grad: bool) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone(), requires_grad)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone(), requires_grad)).collect(),
            softplus_head: self.softplus_head,
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub fn save(&self, prefix: &str, c: &mut TensorContainer) {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            c.push(format!("{prefix}.w{i}"), w.clone());
            c.push(format!("{prefix}.b{i}"), b.clone());
        }
    }

    pub fn load(prefix: &str, layers: usize, softplus_head: bool, c: &mut TensorContainer) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..layers {
            weights.push(c.take(&format!("{prefix}.w{i}"))?);
            biases.push(c.take(&format!("{prefix}.b{i}"))?);
        }
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                return Err(NimbusError::Format(format!(
                    "{prefix}: inconsistent layer shapes {:?} / {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self {
            weights,
            biases,
            softplus_head,
        })
    }
}

impl MlpVars {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let head = if self.softplus_head { Head::Softplus } else { Head::Identity };
        Ok(x.mlp(&self.weights, &self.biases, head)?)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Var> {
        self.weights.iter().chain(self.biases.iter())
    }
}
