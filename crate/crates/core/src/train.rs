//! Minibatch training of [`AktModel`] on annotated samples.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{dim_err, Error, Result};
use crate::matching::training_loss;
use crate::model::{AktModel, ModelConfig, PointPredictions};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Gradients, ParamStore};
use crate::synthfield::{augment, AugmentOp, Point, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: usize,
    /// Random flips and photometric jitter on training samples.
    pub augment: bool,
    /// Rescale the batch gradient to at most this global L2 norm (0 = off).
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 8,
            steps: 500,
            augment: true,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Points divided by the image extents.
pub fn normalize_points(points: &[Point], width: usize, height: usize) -> Vec<Point> {
    points.iter().map(|p| [p[0] / width as f64, p[1] / height as f64]).collect()
}

/// Loss and gradients of one sample, accumulated into `grads` after scaling
/// by `weight`.
pub fn sample_loss(
    model: &AktModel,
    store: &ParamStore,
    image: &Tensor,
    points: &[Point],
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        ref s => return dim_err(format!("expected an [H×W×3] image, got {s:?}")),
    };
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, store, x)?;
    let gt = normalize_points(points, w, h);
    let (loss, _) = training_loss(&mut g, out.coords, out.logits, &gt, [w as f64, h as f64])?;
    let value = g.value(loss).item()?;
    let scaled = g.scale(loss, weight)?;
    g.backward(scaled)?;
    g.accumulate_param_grads(grads);
    Ok(value)
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Model, parameters, optimizer and sampling stream of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AktModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = AktModel::new(model_cfg, &mut store)?;
        let adam = Adam::new(cfg.adam.clone(), &store)?;
        if cfg.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            store,
            adam,
            cfg,
            rng,
            step: 0,
        })
    }

    fn prepare(&mut self, s: &Sample) -> Result<(Tensor, Vec<Point>)> {
        let mut img = s.image.clone();
        let mut pts = s.points.clone();
        if self.cfg.augment {
            for op in [AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Brightness, AugmentOp::Contrast] {
                if self.rng.random_bool(0.5) {
                    (img, pts) = augment(&img, &pts, op, &mut self.rng, None)?;
                }
            }
        }
        Ok((img, pts))
    }

    /// One optimizer update on a batch drawn with replacement from `data`.
    /// Returns the mean loss before the update.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Usage("training split is empty".into()));
        }
        let batch: Vec<&Sample> = (0..self.cfg.batch)
            .map(|_| data.choose(&mut self.rng).expect("non-empty"))
            .collect();
        let mut grads = Gradients::zeros_like(&self.store);
        let weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            let (img, pts) = self.prepare(s)?;
            total += sample_loss(&self.model, &self.store, &img, &pts, weight, &mut grads)?;
        }
        let loss = total * weight;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        if self.cfg.grad_clip > 0.0 {
            let n = global_norm(&grads);
            if n > self.cfg.grad_clip {
                grads.scale(self.cfg.grad_clip / n);
            }
        }
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn predict(&self, image: &Tensor) -> Result<PointPredictions> {
        self.model.predict(&self.store, image)
    }
}

/// Confident predictions of one image in pixel coordinates.
pub fn predict_points(model: &AktModel, store: &ParamStore, image: &Tensor, tau: f64) -> Result<Vec<Point>> {
    let p = model.predict(store, image)?;
    Ok(p.to_pixels(image.shape()[1], image.shape()[0], tau))
}

/// Mean loss over `data` without updating anything.
pub fn evaluate_loss(model: &AktModel, store: &ParamStore, data: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let mut g = Graph::new();
        let x = g.constant(s.image.clone());
        let out = model.forward(&mut g, store, x)?;
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let gt = normalize_points(&s.points, w, h);
        let (loss, _) = training_loss(&mut g, out.coords, out.logits, &gt, [w as f64, h as f64])?;
        total += g.value(loss).item()?;
    }
    Ok(total / data.len().max(1) as f64)
}
