//! Small parameterized building blocks shared by the model modules.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x · W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` (and `{prefix}.bias`) with normal weights of
    /// standard deviation `1/sqrt(in_dim)` and zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_weight(store, prefix, Tensor::randn(&[in_dim, out_dim], std, rng), bias)
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_weight(store, prefix, Tensor::zeros(&[in_dim, out_dim]), bias)
    }

    pub fn with_weight(store: &mut ParamStore, prefix: &str, weight: Tensor, bias: bool) -> Result<Self> {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{prefix}.weight"), weight)?;
        let bias = if bias { Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Two-layer GELU feed-forward `C -> hidden -> C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
