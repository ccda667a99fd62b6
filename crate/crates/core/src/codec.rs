//! Last-frame padding and the graph-convolutional pose encoder/decoder.
//!
//! Each layer computes `act(A·x·W + b)` on a `(batch, D, C)` tensor, where
//! `A` is a learnable `D×D` adjacency over pose dimensions and `W` mixes
//! channels. Encoder and decoder are both three layers wide
//! `C → hidden → hidden → C`; the middle layer carries a residual connection.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{dropout, join, uniform_param, zeros_param, Mode, Module};
use crate::tensor::Tensor;

/// Extends `(persons, D, t)` to `(persons, D, total)` by repeating frame `t`.
pub fn pad_sequence(history: &Tensor, total: usize) -> Result<Tensor> {
    if history.ndim() != 3 {
        return Err(shape_err(
            "pad_sequence",
            format!("expected (persons, D, t), got {:?}", history.shape()),
        ));
    }
    let (p, d, t) = (history.dim(0), history.dim(1), history.dim(2));
    if t == 0 || t > total {
        return Err(Error::Invalid(format!(
            "pad_sequence: observed length {t} must be in 1..={total}"
        )));
    }
    if t == total {
        return Ok(history.clone());
    }
    let last = history.slice(2, t - 1, t)?;
    let fill = last.broadcast_to(&[p, d, total - t])?;
    Tensor::concat(&[history, &fill], 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub adjacency: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl GcnLayer {
    /// Adjacency starts at identity plus N(0, 0.01²) noise, weights use
    /// uniform fan-in scaling, bias is zero.
    pub fn new(
        nodes: usize,
        c_in: usize,
        c_out: usize,
        activation: Activation,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut adj = vec![0.0; nodes * nodes];
        for (i, v) in adj.iter_mut().enumerate() {
            *v = noise.sample(rng) + if i / nodes == i % nodes { 1.0 } else { 0.0 };
        }
        GcnLayer {
            adjacency: Tensor::param(&[nodes, nodes], adj).expect("square"),
            weight: uniform_param(&[c_in, c_out], 1.0 / (c_in as f64).sqrt(), rng),
            bias: zeros_param(&[c_out]),
            activation,
            dropout_rate,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.dim(0)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        if x.ndim() != 3 || x.dim(1) != self.nodes() || x.dim(2) != self.c_in() {
            return Err(shape_err(
                "gcn_layer",
                format!(
                    "input {:?} must be (batch, {}, {})",
                    x.shape(),
                    self.nodes(),
                    self.c_in()
                ),
            ));
        }
        let y = self.adjacency.matmul(x)?.matmul(&self.weight)?.add(&self.bias)?;
        let y = match self.activation {
            Activation::Tanh => y.tanh()?,
            Activation::Identity => y,
        };
        dropout(&y, self.dropout_rate, mode)
    }
}

impl Module for GcnLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "adjacency"), &self.adjacency);
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "adjacency"), &mut self.adjacency);
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Three-layer GCN stack `channels → hidden → hidden → channels`.
#[derive(Clone, Debug)]
pub struct GcnStack {
    pub layers: [GcnLayer; 3],
}

impl GcnStack {
    fn new(nodes: usize, channels: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        GcnStack {
            layers: [
                GcnLayer::new(nodes, channels, hidden, Activation::Tanh, dropout, rng),
                GcnLayer::new(nodes, hidden, hidden, Activation::Tanh, dropout, rng),
                GcnLayer::new(nodes, hidden, channels, Activation::Identity, 0.0, rng),
            ],
        }
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.layers[0].forward(x, mode)?;
        let h = self.layers[1].forward(&h, mode)?.add(&h)?;
        self.layers[2].forward(&h, mode)
    }
}

impl Module for GcnStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoseCodec {
    pub encoder: GcnStack,
    pub decoder: GcnStack,
    pub hidden: usize,
}

impl PoseCodec {
    pub fn new(pose_dim: usize, frames: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        PoseCodec {
            encoder: GcnStack::new(pose_dim, frames, hidden, dropout, rng),
            decoder: GcnStack::new(pose_dim, frames, hidden, dropout, rng),
            hidden,
        }
    }

    /// DCT coefficients `(batch, D, T)` to features of the same shape.
    pub fn encode(&self, coeffs: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.encoder.forward(coeffs, mode)
    }

    /// Features `(batch, D, T)` back to DCT coefficients.
    pub fn decode(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.decoder.forward(features, mode)
    }
}

impl Module for PoseCodec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
