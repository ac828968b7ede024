//! Run configuration with a flat `section.key = value` text form.

use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::kan::{BSplineGrid, FfnKind};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::synthfield::FieldConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub field: FieldConfig,
    pub metric: MetricConfig,
    pub train: TrainConfig,
    /// Scenes written by `generate`.
    pub scenes: usize,
    /// Steps between checkpoints during training (0 = only at the end).
    pub checkpoint_every: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            field: FieldConfig::default(),
            metric: MetricConfig::default(),
            train: TrainConfig::default(),
            scenes: 100,
            checkpoint_every: 100,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Propagates the run seed to the components that draw randomness.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.field.seed = seed;
        self.train.seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.field.validate()?;
        self.metric.validate()?;
        self.train.adam.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let f = &mut self.field;
        let t = &mut self.train;
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "model.height" => m.height = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.backbone_channels" => m.backbone_channels = parse(key, value)?,
            "model.embed_dim" => m.embed_dim = parse(key, value)?,
            "model.encoder_layers" => m.encoder_layers = parse(key, value)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, value)?,
            "model.queries" => m.queries = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.kan_hidden" => m.kan_hidden = parse(key, value)?,
            "model.encoder_attention" => m.encoder_attention = value.parse()?,
            "model.gate_order" => m.gate_order = value.parse()?,
            "model.ffn" => m.ffn = value.parse::<FfnKind>()?,
            "model.pkan_groups" => m.pkan.groups = parse(key, value)?,
            "model.pau_num_order" => m.pkan.num_order = parse(key, value)?,
            "model.pau_den_order" => m.pkan.den_order = parse(key, value)?,
            "model.keep_spline" => m.pkan.keep_spline = parse(key, value)?,
            "model.grid_size" | "model.spline_order" | "model.grid_lo" | "model.grid_hi" => {
                let g = &m.pkan.grid;
                let (mut lo, mut hi) = g.range();
                let (mut size, mut order) = (g.grid_count(), g.degree());
                match key {
                    "model.grid_size" => size = parse(key, value)?,
                    "model.spline_order" => order = parse(key, value)?,
                    "model.grid_lo" => lo = parse(key, value)?,
                    _ => hi = parse(key, value)?,
                }
                m.pkan.grid = BSplineGrid::uniform(lo, hi, size, order)?;
            }
            "field.rows" => f.rows = parse(key, value)?,
            "field.row_spacing_m" => f.row_spacing_m = parse(key, value)?,
            "field.interval_m" => f.interval_m = parse(key, value)?,
            "field.seeds" => f.seeds = parse(key, value)?,
            "field.emergence" => f.emergence = parse(key, value)?,
            "field.jitter_m" => f.jitter_m = parse(key, value)?,
            "field.weed_density" => f.weed_density = parse(key, value)?,
            "field.gsd_mm" => f.gsd_mm = parse(key, value)?,
            "field.width" => f.width = parse(key, value)?,
            "field.height" => f.height = parse(key, value)?,
            "field.plant_radius_px" => f.plant_radius_px = parse(key, value)?,
            "field.noise" => f.noise = parse(key, value)?,
            "field.scenes" => self.scenes = parse(key, value)?,
            "metric.thresholds" => {
                self.metric.thresholds = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "metric.gsd_mm" => self.metric.gsd_mm = parse(key, value)?,
            "metric.tau" => self.metric.tau = parse(key, value)?,
            "train.lr" => t.adam.lr = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.eps" => t.adam.eps = parse(key, value)?,
            "train.weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "train.grad_clip" => t.grad_clip = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "paths.data" => self.data_dir = PathBuf::from(value),
            "paths.out" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, Path::new("<config>"))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every setting, one per line, in a form [`RunConfig::from_text`] reads
    /// back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let f = &self.field;
        let t = &self.train;
        let (lo, hi) = m.pkan.grid.range();
        let thresholds: Vec<String> = self.metric.thresholds.iter().map(u32::to_string).collect();
        let lines = [
            ("seed", self.seed.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.backbone_channels", m.backbone_channels.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.queries", m.queries.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.kan_hidden", m.kan_hidden.to_string()),
            ("model.encoder_attention", m.encoder_attention.to_string()),
            ("model.gate_order", m.gate_order.to_string()),
            ("model.ffn", m.ffn.to_string()),
            ("model.pkan_groups", m.pkan.groups.to_string()),
            ("model.pau_num_order", m.pkan.num_order.to_string()),
            ("model.pau_den_order", m.pkan.den_order.to_string()),
            ("model.keep_spline", m.pkan.keep_spline.to_string()),
            ("model.grid_size", m.pkan.grid.grid_count().to_string()),
            ("model.spline_order", m.pkan.grid.degree().to_string()),
            ("model.grid_lo", lo.to_string()),
            ("model.grid_hi", hi.to_string()),
            ("field.rows", f.rows.to_string()),
            ("field.row_spacing_m", f.row_spacing_m.to_string()),
            ("field.interval_m", f.interval_m.to_string()),
            ("field.seeds", f.seeds.to_string()),
            ("field.emergence", f.emergence.to_string()),
            ("field.jitter_m", f.jitter_m.to_string()),
            ("field.weed_density", f.weed_density.to_string()),
            ("field.gsd_mm", f.gsd_mm.to_string()),
            ("field.width", f.width.to_string()),
            ("field.height", f.height.to_string()),
            ("field.plant_radius_px", f.plant_radius_px.to_string()),
            ("field.noise", f.noise.to_string()),
            ("field.scenes", self.scenes.to_string()),
            ("metric.thresholds", thresholds.join(",")),
            ("metric.gsd_mm", self.metric.gsd_mm.to_string()),
            ("metric.tau", self.metric.tau.to_string()),
            ("train.lr", t.adam.lr.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.eps", t.adam.eps.to_string()),
            ("train.weight_decay", t.adam.weight_decay.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("paths.data", self.data_dir.display().to_string()),
            ("paths.out", self.out_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
