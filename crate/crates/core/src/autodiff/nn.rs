use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// Fully connected layer `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            w: store.add(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Stack of linear layers with ReLU between them and a configurable output
/// activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], output: Activation, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, output }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            x = if i < last {
                tape.relu(x)
            } else {
                match self.output {
                    Activation::None => x,
                    Activation::Relu => tape.relu(x),
                    Activation::Sigmoid => tape.sigmoid(x),
                }
            };
        }
        Ok(x)
    }
}
