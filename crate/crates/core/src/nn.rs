//! Parameter containers and small layers shared by the model components.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward-pass mode. Dropout draws from the explicit generator held by
/// `Train`, so two runs with equal generator state are identical.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout; identity in eval mode or when `rate == 0`.
pub fn dropout(x: &Tensor, rate: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            x.mul(&mask)
        }
        _ => Ok(x.clone()),
    }
}

pub(crate) fn uniform_param(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -bound, bound, rng).requiring_grad()
}

pub(crate) fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requiring_grad()
}

/// `y = x·W (+ b)` over the last axis; `W` is stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform fan-in initialization, zero bias.
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: uniform_param(&[inputs, outputs], bound, rng),
            bias: bias.then(|| zeros_param(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.inputs()) {
            return Err(shape_err(
                "linear",
                format!(
                    "last axis of {:?} must be {} (weight {:?})",
                    x.shape(),
                    self.inputs(),
                    self.weight.shape()
                ),
            ));
        }
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[width]).requiring_grad(),
            beta: zeros_param(&[width]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layernorm_last(&self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
