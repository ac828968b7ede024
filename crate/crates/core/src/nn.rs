//! Small building blocks shared by the layer modules.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Affine map `x·W + b` with `W:[in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(n_in)` weights and zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            weight: store.uniform(format!("{name}.weight"), &[n_in, n_out], bound, rng),
            bias: store.zeros(format!("{name}.bias"), &[n_out]),
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}
