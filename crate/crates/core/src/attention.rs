//! PKAN additive attention and the scaled dot-product baseline.
//!
//! The additive block never forms a token-by-token matrix:
//!
//! 1. `Q, K, V` from three linear projections of `x:[N×d]`;
//! 2. each of `Q` and `K` passes a channel gate and a spatial gate (order
//!    configurable) and the two results are concatenated to `[N×2d]`;
//! 3. a learned reduction `W_c:[2d×d]` gives `U`, tokens are scored by
//!    `⟨U_i, w_a⟩/√d`, softmax-normalized over tokens, and pooled into one
//!    global context vector `g = Σ α_i U_i`;
//! 4. `y_i = g ⊙ V_i`;
//! 5. `x̂ = x + PKAN(y)`.
//!
//! Cost is `O(N·d²)`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::kan::{FeedForward, FfnKind, PkanConfig};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};

/// Channel gate: tokens are averaged per channel, passed through a
/// `d → d/r → d` bottleneck and squashed, then rescale every token.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelGate {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (dim / ratio).max(1);
        Self {
            reduce: Linear::new(store, &format!("{name}.reduce"), dim, hidden, rng),
            expand: Linear::new(store, &format!("{name}.expand"), hidden, dim, rng),
        }
    }

    /// Per-channel gate values `[1×d]`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = g.value(x).dims2()?.1;
        let mean = g.mean(x, 0)?;
        let mean = g.reshape(mean, &[1, d])?;
        let h = self.reduce.forward(g, store, mean)?;
        let h = g.silu(h)?;
        let s = self.expand.forward(g, store, h)?;
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.gate(g, store, x)?;
        g.mul(x, s)
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }
}

/// Spatial gate: each token is scored `d → 1` and squashed.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub scorer: Linear,
}

impl SpatialGate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            scorer: Linear::new(store, &format!("{name}.scorer"), dim, 1, rng),
        }
    }

    /// Per-token gate values `[N×1]`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.scorer.forward(g, store, x)?;
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.gate(g, store, x)?;
        g.mul(x, s)
    }

    pub fn num_params(&self) -> usize {
        self.scorer.num_params()
    }
}

/// Channel and spatial gate pair applied to one of `Q`, `K`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub channel: ChannelGate,
    pub spatial: SpatialGate,
    pub ratio: usize,
}

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            channel: ChannelGate::new(store, &format!("{name}.ca"), dim, ratio, rng),
            spatial: SpatialGate::new(store, &format!("{name}.sa"), dim, rng),
            ratio,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, order: GateOrder) -> Result<Var> {
        match order {
            GateOrder::SpatialAfterChannel => {
                let c = self.channel.forward(g, store, x)?;
                self.spatial.forward(g, store, c)
            }
            GateOrder::ChannelAfterSpatial => {
                let s = self.spatial.forward(g, store, x)?;
                self.channel.forward(g, store, s)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.channel.num_params() + self.spatial.num_params()
    }
}

/// Composition order of the two gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateOrder {
    /// `SA(CA(·))`
    #[default]
    SpatialAfterChannel,
    /// `CA(SA(·))`
    ChannelAfterSpatial,
}

impl std::str::FromStr for GateOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa_ca" | "sa(ca)" => Ok(Self::SpatialAfterChannel),
            "ca_sa" | "ca(sa)" => Ok(Self::ChannelAfterSpatial),
            _ => Err(Error::Config(format!("unknown gate order {s:?}"))),
        }
    }
}

impl std::fmt::Display for GateOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SpatialAfterChannel => "sa_ca",
            Self::ChannelAfterSpatial => "ca_sa",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaaConfig {
    pub dim: usize,
    pub gate_ratio: usize,
    pub gate_order: GateOrder,
    pub ffn: FfnKind,
    pub ffn_hidden: usize,
    pub pkan: PkanConfig,
}

impl PaaConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gate_ratio: 4,
            gate_order: GateOrder::default(),
            ffn: FfnKind::Pkan,
            ffn_hidden: dim,
            pkan: PkanConfig::default(),
        }
    }
}

/// Intermediate tensors of one additive-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `[N×2d]`
    pub gated: Var,
    /// `[N×d]` after the `W_c` reduction.
    pub reduced: Var,
    /// Token weights `[N]`.
    pub alpha: Var,
    /// Global context `[1×d]`.
    pub context: Var,
    pub y: Var,
    pub output: Var,
}

/// The PKAN additive attention block.
#[derive(Clone, Debug)]
pub struct PaaBlock {
    pub cfg: PaaConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub q_gates: GateParams,
    pub k_gates: GateParams,
    pub reduce: Linear,
    /// `[d]`
    pub score: ParamId,
    pub ffn: FeedForward,
}

impl PaaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PaaConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            q_gates: GateParams::new(store, &format!("{name}.q_gate"), d, cfg.gate_ratio, rng),
            k_gates: GateParams::new(store, &format!("{name}.k_gate"), d, cfg.gate_ratio, rng),
            reduce: Linear::new(store, &format!("{name}.reduce"), 2 * d, d, rng),
            score: store.uniform(
                format!("{name}.score"),
                &[d],
                1.0 / (d as f64).sqrt(),
                rng,
            ),
            ffn: FeedForward::new(
                cfg.ffn,
                store,
                &format!("{name}.ffn"),
                d,
                cfg.ffn_hidden,
                &cfg.pkan,
                rng,
            )?,
            cfg,
        })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
            + self.q_gates.num_params()
            + self.k_gates.num_params()
            + self.reduce.num_params()
            + self.cfg.dim
            + self.ffn.num_params()
    }

    /// Steps 1–4: the attended sequence `y` and its intermediates.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionState> {
        let (n, d) = g.value(x).dims2()?;
        if d != self.cfg.dim {
            return dim_err(format!("PAA expects width {}, got {d}", self.cfg.dim));
        }
        if n == 0 {
            return dim_err("PAA needs at least one token");
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let gq = self.q_gates.apply(g, store, q, self.cfg.gate_order)?;
        let gk = self.k_gates.apply(g, store, k, self.cfg.gate_order)?;
        let gated = g.concat(&[gq, gk], 1)?;
        let reduced = self.reduce.forward(g, store, gated)?;

        let w_a = g.param(store, self.score);
        let w_a = g.reshape(w_a, &[d, 1])?;
        let scores = g.matmul(reduced, w_a)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = g.reshape(scores, &[n])?;
        let alpha = g.softmax(scores, 0)?;
        let alpha_row = g.reshape(alpha, &[1, n])?;
        let context = g.matmul(alpha_row, reduced)?;
        let y = g.mul(v, context)?;
        Ok(AttentionState {
            q,
            k,
            v,
            gated,
            reduced,
            alpha,
            context,
            y,
            output: y,
        })
    }

    /// Full block with its internal residual: `x + PKAN(y)`.
    pub fn forward_state(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionState> {
        let mut st = self.attend(g, store, x)?;
        let f = self.ffn.forward(g, store, st.y)?;
        st.output = g.add(x, f)?;
        Ok(st)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_state(g, store, x)?.output)
    }

    /// `PKAN(y(x))`: the residual branch, for callers that add the skip
    /// connection to a different tensor (pre-norm layers).
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let st = self.attend(g, store, x)?;
        self.ffn.forward(g, store, st.y)
    }
}

/// Standard multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params()
    }

    /// Queries from `x_q`, keys from `x_k`, values from `x_v`.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        x_k: Var,
        x_v: Var,
    ) -> Result<Var> {
        for &x in &[x_q, x_k, x_v] {
            let d = g.value(x).dims2()?.1;
            if d != self.dim {
                return dim_err(format!("attention expects width {}, got {d}", self.dim));
            }
        }
        let q = self.q.forward(g, store, x_q)?;
        let k = self.k.forward(g, store, x_k)?;
        let v = self.v.forward(g, store, x_v)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        self.out.forward(g, store, cat)
    }

    /// Self-attention over `x:[N×d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.attend(g, store, x, x, x)
    }
}

/// Encoder attention flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Mha,
    Paa,
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(Self::Mha),
            "paa" => Ok(Self::Paa),
            _ => Err(Error::Config(format!("unknown attention variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mha => "mha",
            Self::Paa => "paa",
        })
    }
}

/// Multiply-adds per `N·d²` of the additive block: Q, K, V projections (3),
/// the `2d → d` reduction (2), and the two PKAN linear maps at hidden width
/// `d` (2).
pub const PAA_COST_ND2: f64 = 7.0;

/// Multiply-adds per `N·d` of the additive block: token means and gating
/// products of both channel gates (4), spatial scorers and gating products
/// (4), token scoring (1), context pooling (1), the `g ⊙ V` product (1),
/// Padé numerator and denominator terms at orders (5, 4) (9), and the
/// per-channel cubic spline on a 5-interval grid (8). The `d → d/r → d`
/// channel-gate bottlenecks do not scale with `N` and are left out.
pub const PAA_COST_ND: f64 = 28.0;

/// Analytic multiply-add count of one attention block over `n` tokens of
/// width `d`.
///
/// * MHA: `4·N·d²` for the Q, K, V and output projections plus `2·N²·d` for
///   the score matrix and the weighted value sum.
/// * PAA: `PAA_COST_ND2·N·d² + PAA_COST_ND·N·d`.
pub fn attention_flops(variant: AttentionVariant, n: usize, d: usize) -> Result<f64> {
    if n == 0 || d == 0 {
        return Err(Error::Config("attention_flops needs N, d >= 1".into()));
    }
    let (n, d) = (n as f64, d as f64);
    Ok(match variant {
        AttentionVariant::Mha => 4.0 * n * d * d + 2.0 * n * n * d,
        AttentionVariant::Paa => PAA_COST_ND2 * n * d * d + PAA_COST_ND * n * d,
    })
}

/// Smallest token count at which the additive block is cheaper than MHA.
pub fn flops_crossover(d: usize) -> Result<usize> {
    let mut n = 1;
    loop {
        if attention_flops(AttentionVariant::Paa, n, d)? < attention_flops(AttentionVariant::Mha, n, d)? {
            return Ok(n);
        }
        n += 1;
    }
}
