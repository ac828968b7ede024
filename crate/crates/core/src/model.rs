//! The full point localizer: conv backbone → token projection with 2-D
//! sine–cosine positions → additive-attention encoder → query decoder →
//! point regression head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_flops, AttentionVariant, GateOrder, MultiHeadAttention, PaaBlock, PaaConfig};
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::kan::{BSplineGrid, FeedForward, FfnKind, KanLinear, PkanConfig};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Spatial reduction of the backbone.
pub const STRIDE: usize = 32;
const STAGES: usize = 5;
const CONV: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    pad: 1,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Backbone output channels `C`.
    pub backbone_channels: usize,
    /// Token width `c`.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of instance queries `|M|`.
    pub queries: usize,
    /// Heads of the decoder's self- and cross-attention.
    pub heads: usize,
    /// Hidden width of the KAN linear pairs.
    pub kan_hidden: usize,
    pub encoder_attention: AttentionVariant,
    pub gate_order: GateOrder,
    pub ffn: FfnKind,
    pub pkan: PkanConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            backbone_channels: 256,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 64,
            heads: 4,
            kan_hidden: 32,
            encoder_attention: AttentionVariant::Paa,
            gate_order: GateOrder::default(),
            ffn: FfnKind::Pkan,
            pkan: PkanConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % STRIDE != 0 || self.width % STRIDE != 0 {
            return bad(format!(
                "image extents {}×{} must be positive multiples of {STRIDE}",
                self.height, self.width
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim {} must be a multiple of 4", self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.backbone_channels < 1 << (STAGES - 1) {
            return bad(format!(
                "backbone_channels must be at least {}",
                1 << (STAGES - 1)
            ));
        }
        if self.queries == 0 || self.kan_hidden == 0 {
            return bad("queries and kan_hidden must be positive".into());
        }
        if self.pkan.groups == 0 || self.embed_dim % self.pkan.groups != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} PKAN groups",
                self.embed_dim, self.pkan.groups
            ));
        }
        Ok(())
    }

    /// Token count `(H/32)·(W/32)`.
    pub fn tokens(&self) -> usize {
        (self.height / STRIDE) * (self.width / STRIDE)
    }

    /// Output channels of each backbone stage, doubling up to `C`.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..STAGES)
            .map(|i| (self.backbone_channels >> (STAGES - 1 - i)).max(1))
            .collect()
    }
}

/// Flattened tokens plus the positional table that was added to them.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[N×c]`, positions included.
    pub tokens: Var,
    /// `[N×c]`
    pub pos: Var,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[M×2]` in `(0, 1)`, as `(x, y)`.
    pub coords: Var,
    /// `[M]` confidence logits.
    pub logits: Var,
    /// `[M]` confidences in `(0, 1)`.
    pub confidence: Var,
}

/// Plain-value predictions in normalized image space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPredictions {
    pub coords: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl PointPredictions {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Pixel-space points whose confidence exceeds `tau`.
    pub fn to_pixels(&self, width: usize, height: usize, tau: f64) -> Vec<[f64; 2]> {
        self.coords
            .iter()
            .zip(&self.confidence)
            .filter(|(_, &c)| c > tau)
            .map(|(p, _)| [p[0] * width as f64, p[1] * height as f64])
            .collect()
    }
}

/// Fixed 2-D sine–cosine table for a `rows × cols` token grid, row-major.
/// The first `c/2` channels encode the row index, the rest the column; each
/// half interleaves `sin(pos·ω_p)`, `cos(pos·ω_p)` with
/// `ω_p = 10000^(−2p/(c/2))`.
pub fn sincos_table(rows: usize, cols: usize, c: usize) -> Result<Tensor> {
    let grid: Vec<[f64; 2]> = (0..rows)
        .flat_map(|r| (0..cols).map(move |col| [col as f64, r as f64]))
        .collect();
    sincos_points(&grid, c)
}

#[derive(Clone, Debug)]
pub enum EncoderAttention {
    Paa(PaaBlock),
    Mha(MultiHeadAttention),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: EncoderAttention,
    pub norm2: LayerNorm,
    pub kan1: KanLinear,
    pub kan2: KanLinear,
}

impl EncoderLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = match &self.attn {
            EncoderAttention::Paa(p) => p.branch(g, store, h)?,
            EncoderAttention::Mha(m) => m.forward(g, store, h)?,
        };
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.kan1.forward(g, store, h)?;
        let h = self.kan2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norms: [LayerNorm; 5],
    pub self_attn: MultiHeadAttention,
    pub ffn1: FeedForward,
    pub cross_attn: MultiHeadAttention,
    pub ffn2: FeedForward,
    pub kan1: KanLinear,
    pub kan2: KanLinear,
}

impl DecoderLayer {
    /// `memory_pos` is added to the cross-attention keys and `query_pos` to
    /// the queries (and self-attention keys).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        memory_pos: Option<Var>,
        query_pos: Option<Var>,
    ) -> Result<Var> {
        let with_pos = |g: &mut Graph, x: Var, p: Option<Var>| match p {
            Some(p) => g.add(x, p),
            None => Ok(x),
        };
        let mut q = queries;
        let h = self.norms[0].forward(g, store, q)?;
        let hp = with_pos(g, h, query_pos)?;
        let a = self.self_attn.attend(g, store, hp, hp, h)?;
        q = g.add(q, a)?;

        let h = self.norms[1].forward(g, store, q)?;
        let f = self.ffn1.forward(g, store, h)?;
        q = g.add(q, f)?;

        let h = self.norms[2].forward(g, store, q)?;
        let hp = with_pos(g, h, query_pos)?;
        let keys = with_pos(g, memory, memory_pos)?;
        let a = self.cross_attn.attend(g, store, hp, keys, memory)?;
        q = g.add(q, a)?;

        let h = self.norms[3].forward(g, store, q)?;
        let f = self.ffn2.forward(g, store, h)?;
        q = g.add(q, f)?;

        let h = self.norms[4].forward(g, store, q)?;
        let h = self.kan1.forward(g, store, h)?;
        let h = self.kan2.forward(g, store, h)?;
        g.add(q, h)
    }
}

/// Fixed anchor of every query: cell centres of a near-square grid over the
/// unit square, filled row-major.
pub fn reference_points(queries: usize) -> Vec<[f64; 2]> {
    let rows = ((queries as f64).sqrt().floor() as usize).max(1);
    let cols = queries.div_ceil(rows);
    (0..queries)
        .map(|j| {
            let (r, c) = (j / cols, j % cols);
            [(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64]
        })
        .collect()
}

/// Sine–cosine codes of continuous `(x, y)` positions in token units, in the
/// layout of [`sincos_table`].
pub fn sincos_points(points: &[[f64; 2]], c: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::Config(format!("embedding width {c} must be a multiple of 4")));
    }
    let half = c / 2;
    let mut data = Vec::with_capacity(points.len() * c);
    for &[x, y] in points {
        for pos in [y, x] {
            for p in 0..half / 2 {
                let w = 10000f64.powf(-2.0 * p as f64 / half as f64);
                data.push((pos * w).sin());
                data.push((pos * w).cos());
            }
        }
    }
    Tensor::new(&[points.len(), c], data)
}

/// The assembled localizer. Parameters live in a separate [`ParamStore`]
/// with names prefixed `backbone.`, `encoder.`, `decoder.` and `head.`.
#[derive(Clone, Debug)]
pub struct AktModel {
    pub cfg: ModelConfig,
    pub convs: Vec<(ParamId, ParamId)>,
    pub proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: ParamId,
    /// Normalized anchors, one per query.
    pub reference: Vec<[f64; 2]>,
    pub head_norm: LayerNorm,
    pub head: [Linear; 3],
    pub conf: Linear,
}

fn kan_grid(cfg: &ModelConfig) -> BSplineGrid {
    cfg.pkan.grid.clone()
}

impl AktModel {
    /// Builds the model and registers its parameters, drawing initial values
    /// from a generator seeded with `cfg.seed`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.embed_dim;

        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, cout) in cfg.stage_channels().into_iter().enumerate() {
            let fan_in = CONV.kernel * CONV.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = store.uniform(format!("backbone.conv{i}.weight"), &[fan_in, cout], bound, rng);
            let b = store.zeros(format!("backbone.conv{i}.bias"), &[cout]);
            convs.push((w, b));
            cin = cout;
        }
        let proj = Linear::new(store, "backbone.proj", cfg.backbone_channels, c, rng);

        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            let name = format!("encoder.{l}");
            let attn = match cfg.encoder_attention {
                AttentionVariant::Paa => {
                    let pc = PaaConfig {
                        dim: c,
                        gate_ratio: 4,
                        gate_order: cfg.gate_order,
                        ffn: cfg.ffn,
                        ffn_hidden: c,
                        pkan: cfg.pkan.clone(),
                    };
                    EncoderAttention::Paa(PaaBlock::new(store, &format!("{name}.paa"), pc, rng)?)
                }
                AttentionVariant::Mha => EncoderAttention::Mha(MultiHeadAttention::new(
                    store,
                    &format!("{name}.mha"),
                    c,
                    cfg.heads,
                    rng,
                )?),
            };
            encoder.push(EncoderLayer {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
                attn,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
                kan1: KanLinear::new(store, &format!("{name}.kan1"), c, cfg.kan_hidden, kan_grid(&cfg), rng),
                kan2: KanLinear::new(store, &format!("{name}.kan2"), cfg.kan_hidden, c, kan_grid(&cfg), rng),
            });
        }

        let mut decoder = Vec::new();
        for l in 0..cfg.decoder_layers {
            let name = format!("decoder.{l}");
            let norms = std::array::from_fn(|i| LayerNorm::new(store, &format!("{name}.norm{i}"), c));
            decoder.push(DecoderLayer {
                norms,
                self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), c, cfg.heads, rng)?,
                ffn1: FeedForward::new(cfg.ffn, store, &format!("{name}.ffn1"), c, c, &cfg.pkan, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), c, cfg.heads, rng)?,
                ffn2: FeedForward::new(cfg.ffn, store, &format!("{name}.ffn2"), c, c, &cfg.pkan, rng)?,
                kan1: KanLinear::new(store, &format!("{name}.kan1"), c, cfg.kan_hidden, kan_grid(&cfg), rng),
                kan2: KanLinear::new(store, &format!("{name}.kan2"), cfg.kan_hidden, c, kan_grid(&cfg), rng),
            });
        }

        let queries = store.normal("head.queries", &[cfg.queries, c], 0.1, rng);
        let head_norm = LayerNorm::new(store, "head.norm", c);
        let head = [
            Linear::new(store, "head.point0", c, c, rng),
            Linear::new(store, "head.point1", c, c, rng),
            Linear::new(store, "head.point2", c, 2, rng),
        ];
        let conf = Linear::new(store, "head.conf", c, 1, rng);
        // Start confidences near 0.1 so early steps are not dominated by
        // the many unmatched queries.
        store.set(conf.bias, Tensor::vector(vec![(0.1f64 / 0.9).ln()])?)?;
        // Small offsets at first, so predictions start near their anchors.
        let w = store.get(head[2].weight).data().iter().map(|v| 0.1 * v).collect();
        store.set(head[2].weight, Tensor::new(&[c, 2], w)?)?;

        Ok(Self {
            reference: reference_points(cfg.queries),
            cfg,
            convs,
            proj,
            encoder,
            decoder,
            queries,
            head_norm,
            head,
            conf,
        })
    }

    /// `image:[H×W×3]` → `[(H/32)×(W/32)×C]`.
    pub fn backbone_forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        if shape != [self.cfg.height, self.cfg.width, 3] {
            if shape.len() == 3 && shape[2] == 3 && (shape[0] % STRIDE != 0 || shape[1] % STRIDE != 0) {
                return Err(Error::Config(format!(
                    "image extents {}×{} are not multiples of {STRIDE}",
                    shape[0], shape[1]
                )));
            }
            return dim_err(format!(
                "expected image [{}, {}, 3], got {shape:?}",
                self.cfg.height, self.cfg.width
            ));
        }
        let mut x = image;
        for &(w, b) in &self.convs {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            x = g.conv2d(x, wv, bv, CONV)?;
            x = g.silu(x)?;
        }
        Ok(x)
    }

    /// Projects `C → c`, flattens row-major and adds the positional table.
    pub fn positional_embed(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<TokenSequence> {
        let (rows, cols, ch) = match *g.shape(features) {
            [r, c, ch] => (r, c, ch),
            ref s => return dim_err(format!("feature map must be rank 3, got {s:?}")),
        };
        let flat = g.reshape(features, &[rows * cols, ch])?;
        let proj = self.proj.forward(g, store, flat)?;
        let pos = g.constant(sincos_table(rows, cols, self.cfg.embed_dim)?);
        let tokens = g.add(proj, pos)?;
        Ok(TokenSequence { tokens, pos })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.encoder {
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }

    /// Anchor codes `[M×c]` in the token frame of a `rows × cols` memory.
    pub fn query_pos(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let pts: Vec<[f64; 2]> = self
            .reference
            .iter()
            .map(|&[x, y]| [x * cols as f64 - 0.5, y * rows as f64 - 0.5])
            .collect();
        sincos_points(&pts, self.cfg.embed_dim)
    }

    /// Row-major index of the token containing each anchor.
    pub fn anchor_cells(&self, rows: usize, cols: usize) -> Vec<usize> {
        self.reference
            .iter()
            .map(|&[x, y]| {
                let r = ((y * rows as f64) as usize).min(rows - 1);
                let c = ((x * cols as f64) as usize).min(cols - 1);
                r * cols + c
            })
            .collect()
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, pos: Option<Var>) -> Result<Var> {
        let (rows, cols) = (self.cfg.height / STRIDE, self.cfg.width / STRIDE);
        let qpos = g.constant(self.query_pos(rows, cols)?);
        // Each query starts from the memory token under its anchor.
        let cells: Vec<usize> = self.anchor_cells(rows, cols);
        let seeded = g.gather_rows(memory, &cells)?;
        let q0 = g.param(store, self.queries);
        let mut q = g.add(q0, seeded)?;
        for layer in &self.decoder {
            q = layer.forward(g, store, q, memory, pos, Some(qpos))?;
        }
        Ok(q)
    }

    pub fn head_forward(&self, g: &mut Graph, store: &ParamStore, queries: Var) -> Result<PredictionVars> {
        let m = g.shape(queries)[0];
        if m > self.reference.len() {
            return dim_err(format!("{m} queries but {} anchors", self.reference.len()));
        }
        let h = self.head_norm.forward(g, store, queries)?;
        let p = self.head[0].forward(g, store, h)?;
        let p = g.silu(p)?;
        let p = self.head[1].forward(g, store, p)?;
        let p = g.silu(p)?;
        let p = self.head[2].forward(g, store, p)?;
        let anchors: Vec<f64> = self.reference[..m]
            .iter()
            .flatten()
            .map(|&v| (v / (1.0 - v)).ln())
            .collect();
        let anchors = g.constant(Tensor::new(&[m, 2], anchors)?);
        let p = g.add(p, anchors)?;
        let coords = g.sigmoid(p)?;
        let z = self.conf.forward(g, store, h)?;
        let logits = g.reshape(z, &[m])?;
        let confidence = g.sigmoid(logits)?;
        Ok(PredictionVars {
            coords,
            logits,
            confidence,
        })
    }

    /// Records a full forward pass of `image:[H×W×3]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<PredictionVars> {
        let f = self.backbone_forward(g, store, image)?;
        let seq = self.positional_embed(g, store, f)?;
        let memory = self.encode(g, store, seq.tokens)?;
        let q = self.decode(g, store, memory, Some(seq.pos))?;
        self.head_forward(g, store, q)
    }

    /// Inference on one image.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<PointPredictions> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, store, x)?;
        Ok(predictions_from(&g, &out))
    }
}

pub fn predictions_from(g: &Graph, out: &PredictionVars) -> PointPredictions {
    PointPredictions {
        coords: g.data(out.coords).chunks(2).map(|c| [c[0], c[1]]).collect(),
        confidence: g.data(out.confidence).to_vec(),
    }
}

/// Per-group totals of an analytic cost count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostBreakdown {
    pub backbone: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub head: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.backbone + self.encoder + self.decoder + self.head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCost {
    pub params: CostBreakdown,
    pub flops: CostBreakdown,
}

fn linear_params(i: usize, o: usize) -> f64 {
    (i * o + o) as f64
}

fn kan_pair(cfg: &ModelConfig) -> (f64, f64) {
    let nb = cfg.pkan.grid.num_basis() as f64;
    let (c, h) = (cfg.embed_dim as f64, cfg.kan_hidden as f64);
    let params = 2.0 * c * h * (nb + 2.0);
    // Base and spline matrix products per token.
    let flops_per_token = 2.0 * c * h * (nb + 1.0);
    (params, flops_per_token)
}

fn ffn_cost(cfg: &ModelConfig, hidden: usize) -> (f64, f64) {
    let c = cfg.embed_dim as f64;
    let h = hidden as f64;
    let nb = cfg.pkan.grid.num_basis() as f64;
    match cfg.ffn {
        FfnKind::Mlp => (linear_params(cfg.embed_dim, hidden) + linear_params(hidden, cfg.embed_dim), 2.0 * c * h),
        FfnKind::Kan => (2.0 * c * h * (nb + 2.0), 2.0 * c * h * (nb + 1.0)),
        FfnKind::Pkan => {
            let p = &cfg.pkan;
            let g = p.groups as f64;
            let mut params = linear_params(cfg.embed_dim, hidden)
                + linear_params(hidden, cfg.embed_dim)
                + g * (p.num_order + 1) as f64
                + p.den_order as f64
                + g;
            let mut flops = 2.0 * c * h + (p.num_order + p.den_order) as f64 * h;
            if p.keep_spline {
                params += h * (nb + 1.0);
                flops += nb * h;
            }
            (params, flops)
        }
    }
}

fn mha_params(c: usize) -> f64 {
    4.0 * linear_params(c, c)
}

/// Closed-form parameter and multiply-add counts. FLOPs count matrix
/// multiply-adds (and, inside attention, the terms of [`attention_flops`]);
/// normalization and pointwise activations outside attention are ignored.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<ModelCost> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let cf = c as f64;
    let n = cfg.tokens();
    let nf = n as f64;
    let m = cfg.queries as f64;
    let mut params = CostBreakdown::default();
    let mut flops = CostBreakdown::default();

    let (mut h, mut w) = (cfg.height, cfg.width);
    let mut cin = 3;
    for cout in cfg.stage_channels() {
        h = CONV.out_extent(h);
        w = CONV.out_extent(w);
        let fan_in = CONV.kernel * CONV.kernel * cin;
        params.backbone += (fan_in * cout + cout) as f64;
        flops.backbone += (h * w * fan_in * cout) as f64;
        cin = cout;
    }
    params.backbone += linear_params(cfg.backbone_channels, c);
    flops.backbone += nf * cfg.backbone_channels as f64 * cf;

    let (kan_p, kan_f) = kan_pair(cfg);
    let norm = 2.0 * cf;
    let (ffn_p, ffn_f) = ffn_cost(cfg, c);
    let (enc_attn_p, enc_attn_f) = match cfg.encoder_attention {
        AttentionVariant::Paa => {
            let gate = linear_params(c, (c / 4).max(1)) + linear_params((c / 4).max(1), c) + linear_params(c, 1);
            let p = 3.0 * linear_params(c, c) + 2.0 * gate + linear_params(2 * c, c) + cf + ffn_p;
            (p, attention_flops(AttentionVariant::Paa, n, c)?)
        }
        AttentionVariant::Mha => (mha_params(c), attention_flops(AttentionVariant::Mha, n, c)?),
    };
    let e = cfg.encoder_layers as f64;
    params.encoder = e * (2.0 * norm + enc_attn_p + kan_p);
    flops.encoder = e * (enc_attn_f + nf * kan_f);

    let d = cfg.decoder_layers as f64;
    let cross = 2.0 * m * cf * cf + 2.0 * nf * cf * cf + 2.0 * m * nf * cf;
    params.decoder = d * (5.0 * norm + 2.0 * mha_params(c) + 2.0 * ffn_p + kan_p);
    flops.decoder = d * (attention_flops(AttentionVariant::Mha, cfg.queries, c)? + cross + m * (2.0 * ffn_f + kan_f));

    params.head = m * cf + norm + 2.0 * linear_params(c, c) + linear_params(c, 2) + linear_params(c, 1);
    flops.head = m * (2.0 * cf * cf + 2.0 * cf + cf);
    Ok(ModelCost { params, flops })
}
