//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed updates.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (id, g) in grads.iter() {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.data_mut(id);
            for i in 0..theta.len() {
                let gi = g[i] + weight_decay * theta[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
