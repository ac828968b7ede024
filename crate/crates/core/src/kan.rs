//! Kolmogorov–Arnold layers.
//!
//! * [`BSplineGrid`] and [`KanLinear`]: every edge `(q, p)` carries its own
//!   function `φ(x) = w_b·silu(x) + w_s·Σ c_i B_i(x)`.
//! * [`PauParams`] and the grouped Padé unit: `w·P(x) / (1 + |b_1 x + … + b_n x^n|)`,
//!   whose denominator is at least 1 everywhere.
//! * [`PkanBlock`]: linear → grouped Padé activation (optionally plus a
//!   per-channel spline) → linear. All groups share one denominator.
//! * [`Mlp`]: the plain perceptron baseline.

use rand::Rng;

use crate::autodiff::{sigmoid, CustomOp, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform knot vector over `[lo, hi]` extended by `degree` knots per side.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineGrid {
    knots: Vec<f64>,
    degree: usize,
    grid_count: usize,
    lo: f64,
    hi: f64,
}

impl BSplineGrid {
    pub fn uniform(lo: f64, hi: f64, grid_count: usize, degree: usize) -> Result<Self> {
        if grid_count < 1 {
            return Err(Error::Config("B-spline grid needs at least one interval".into()));
        }
        if degree < 1 {
            return Err(Error::Config("B-spline degree must be at least 1".into()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid B-spline range [{lo}, {hi}]")));
        }
        let h = (hi - lo) / grid_count as f64;
        let knots = (0..grid_count + 2 * degree + 1)
            .map(|j| lo + (j as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            knots,
            degree,
            grid_count,
            lo,
            hi,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn grid_count(&self) -> usize {
        self.grid_count
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid_count + self.degree
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`, restricted to the spans
    /// covering `[lo, hi]`; the last span is closed on the right.
    fn span(&self, x: f64) -> usize {
        let k = self.degree;
        let last = self.grid_count + k - 1;
        let h = (self.hi - self.lo) / self.grid_count as f64;
        let mut s = (k + ((x - self.lo) / h).floor().max(0.0) as usize).min(last);
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        while s > k && x < self.knots[s] {
            s -= 1;
        }
        s
    }

    /// The `degree + 1` non-zero basis values of the given degree at `x`,
    /// for basis indices `span - degree ..= span`.
    fn local_basis(&self, x: f64, span: usize, degree: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        n
    }

    /// All `G + k` basis values at `x`; inputs outside `[lo, hi]` are
    /// clamped to the boundary.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        self.basis_into(x, &mut out);
        out
    }

    pub(crate) fn basis_into(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let x = x.clamp(self.lo, self.hi);
        let s = self.span(x);
        let local = self.local_basis(x, s, self.degree);
        let first = s - self.degree;
        out[first..=s].copy_from_slice(&local);
    }

    /// Derivatives of all basis values with respect to `x`. Zero outside
    /// `[lo, hi]`, where the input is clamped.
    pub(crate) fn basis_deriv_into(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if x < self.lo || x > self.hi {
            return;
        }
        let k = self.degree;
        let t = &self.knots;
        let s = self.span(x);
        let lower = self.local_basis(x, s, k - 1);
        for r in 0..=k {
            let i = s - k + r;
            let mut d = 0.0;
            if r >= 1 {
                d += lower[r - 1] / (t[i + k] - t[i]);
            }
            if r < k {
                d -= lower[r] / (t[i + k + 1] - t[i + 1]);
            }
            out[i] = k as f64 * d;
        }
    }
}

/// Expands every element of `x` into its B-spline basis: shape
/// `x.shape + [G + k]`.
struct BasisExpansion {
    grid: BSplineGrid,
}

impl CustomOp for BasisExpansion {
    fn name(&self) -> &str {
        "bspline_basis"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let nb = self.grid.num_basis();
        let mut out = vec![0.0; x.numel() * nb];
        for (e, &v) in x.data().iter().enumerate() {
            self.grid.basis_into(v, &mut out[e * nb..(e + 1) * nb]);
        }
        let mut shape = x.shape().to_vec();
        shape.push(nb);
        Ok(Tensor::from_raw(shape, out))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let nb = self.grid.num_basis();
        let mut d = vec![0.0; nb];
        let gx = x
            .data()
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                self.grid.basis_deriv_into(v, &mut d);
                d.iter().zip(&g[e * nb..(e + 1) * nb]).map(|(a, b)| a * b).sum()
            })
            .collect();
        vec![gx]
    }
}

/// Records the basis expansion of `x` on the graph.
pub fn basis_expand(g: &mut Graph, x: Var, grid: &BSplineGrid) -> Result<Var> {
    g.custom(Box::new(BasisExpansion { grid: grid.clone() }), &[x])
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Parameters of one edge function of a KAN layer.
#[derive(Clone, Debug)]
pub struct KanEdge<'a> {
    pub w_b: f64,
    pub w_s: f64,
    pub coeffs: &'a [f64],
    pub grid: &'a BSplineGrid,
}

/// Base activation of an edge function.
#[derive(Clone, Debug)]
pub enum BaseActivation {
    Silu,
    Pau(PauParams),
}

/// `w_b·base(x) + w_s·Σ c_i B_i(x)` for a single scalar input.
pub fn kan_phi(x: f64, edge: &KanEdge<'_>, base: &BaseActivation) -> f64 {
    let b = match base {
        BaseActivation::Silu => silu(x),
        BaseActivation::Pau(p) => p.eval(x),
    };
    let spline: f64 = edge
        .grid
        .basis(x)
        .iter()
        .zip(edge.coeffs)
        .map(|(bi, ci)| bi * ci)
        .sum();
    edge.w_b * b + edge.w_s * spline
}

/// A KAN layer `n_in → n_out` with SiLU base and spline residual on each edge.
#[derive(Clone, Debug)]
pub struct KanLinear {
    pub n_in: usize,
    pub n_out: usize,
    pub grid: BSplineGrid,
    /// `[n_out × n_in × (G+k)]`
    pub coeffs: ParamId,
    /// `[n_out × n_in]`
    pub w_b: ParamId,
    /// `[n_out × n_in]`
    pub w_s: ParamId,
}

impl KanLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        grid: BSplineGrid,
        rng: &mut impl Rng,
    ) -> Self {
        let nb = grid.num_basis();
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            coeffs: store.uniform(format!("{name}.coeffs"), &[n_out, n_in, nb], 0.1 * bound, rng),
            w_b: store.uniform(format!("{name}.w_b"), &[n_out, n_in], bound, rng),
            w_s: store.full(format!("{name}.w_s"), &[n_out, n_in], 1.0),
            n_in,
            n_out,
            grid,
        }
    }

    /// `n_in·n_out·(G+k+2)`.
    pub fn num_params(&self) -> usize {
        count_kan_params(self.n_in, self.n_out, &self.grid)
    }

    /// `out[b, q] = Σ_p φ_{q,p}(x[b, p])` for `x:[batch × n_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (batch, width) = g.value(x).dims2()?;
        if width != self.n_in {
            return dim_err(format!(
                "KAN layer expects width {}, got {width}",
                self.n_in
            ));
        }
        let nb = self.grid.num_basis();
        let w_b = g.param(store, self.w_b);
        let w_s = g.param(store, self.w_s);
        let coeffs = g.param(store, self.coeffs);

        let base = g.silu(x)?;
        let w_b_t = g.transpose(w_b)?;
        let base_term = g.matmul(base, w_b_t)?;

        let basis = basis_expand(g, x, &self.grid)?;
        let basis = g.reshape(basis, &[batch, self.n_in * nb])?;
        let w_s3 = g.reshape(w_s, &[self.n_out, self.n_in, 1])?;
        let scaled = g.mul(coeffs, w_s3)?;
        let scaled = g.reshape(scaled, &[self.n_out, self.n_in * nb])?;
        let scaled_t = g.transpose(scaled)?;
        let spline_term = g.matmul(basis, scaled_t)?;
        g.add(base_term, spline_term)
    }
}

pub fn count_kan_params(n_in: usize, n_out: usize, grid: &BSplineGrid) -> usize {
    n_in * n_out * (grid.num_basis() + 2)
}

/// Numerator/denominator coefficients of a safe Padé unit fitted to SiLU on
/// `[-3, 3]` (orders 5 and 4, linearized least squares; max deviation ≈ 9e-7).
pub const SILU_PAU_NUMERATOR: [f64; 6] = [
    4.723_562_434_670_494e-7,
    0.499_999_999_999_999_5,
    0.249_996_631_106_479_38,
    0.053_250_587_919_958_49,
    0.005_795_845_558_274_57,
    0.000_274_250_847_807_808_1,
];
pub const SILU_PAU_DENOMINATOR: [f64; 4] = [
    -4.235_258_099_585_401_4e-13,
    0.106_501_175_840_128_19,
    -4.138_649_752_695_182e-14,
    0.000_548_501_695_618_763_6,
];

/// A single Padé activation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct PauParams {
    /// `a_0 … a_m`
    pub numerator: Vec<f64>,
    /// `b_1 … b_n`
    pub denominator: Vec<f64>,
    pub scale: f64,
    pub group_id: usize,
}

impl PauParams {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>, scale: f64) -> Result<Self> {
        if numerator.len() < 2 || denominator.is_empty() {
            return Err(Error::Config(
                "Padé orders must satisfy m >= 1 and n >= 1".into(),
            ));
        }
        Ok(Self {
            numerator,
            denominator,
            scale,
            group_id: 0,
        })
    }

    /// Orders (5, 4) initialized to the SiLU fit.
    pub fn silu_init() -> Self {
        Self {
            numerator: SILU_PAU_NUMERATOR.to_vec(),
            denominator: SILU_PAU_DENOMINATOR.to_vec(),
            scale: 1.0,
            group_id: 0,
        }
    }

    pub fn orders(&self) -> (usize, usize) {
        (self.numerator.len() - 1, self.denominator.len())
    }

    /// `Q(x) = 1 + |b_1 x + … + b_n x^n|`
    pub fn denominator_at(&self, x: f64) -> f64 {
        1.0 + inner_poly(&self.denominator, x).abs()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.scale * horner(&self.numerator, x) / self.denominator_at(x)
    }
}

/// `a_0 + a_1 x + … + a_m x^m`
fn horner(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `b_1 x + … + b_n x^n`
fn inner_poly(b: &[f64], x: f64) -> f64 {
    x * horner(b, x)
}

/// Derivative of `Σ_{i>=0} a_i x^i`.
fn horner_deriv(a: &[f64], x: f64) -> f64 {
    a.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + i as f64 * c)
}

/// Elementwise Padé unit on a tensor.
pub fn pau_eval(x: &Tensor, p: &PauParams) -> Tensor {
    let data = x.data().iter().map(|&v| p.eval(v)).collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

/// Grouped Padé unit over the last axis of `x` (`C` channels split into
/// `groups` contiguous blocks). Inputs: `x`, numerators `[g × (m+1)]`,
/// shared denominator `[n]`, scales `[g]`.
struct GroupedPau {
    groups: usize,
}

impl GroupedPau {
    fn group_of(&self, channel: usize, channels: usize) -> usize {
        channel / (channels / self.groups)
    }
}

impl CustomOp for GroupedPau {
    fn name(&self) -> &str {
        "pau"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, num, den, scale) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let c = *x.shape().last().unwrap_or(&1);
        let m1 = num.shape()[1];
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                let gi = self.group_of(e % c, c);
                let a = &num.data()[gi * m1..(gi + 1) * m1];
                scale.data()[gi] * horner(a, v) / (1.0 + inner_poly(den.data(), v).abs())
            })
            .collect();
        Ok(Tensor::from_raw(x.shape().to_vec(), out))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let (x, num, den, scale) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let c = *x.shape().last().unwrap_or(&1);
        let m1 = num.shape()[1];
        let b = den.data();
        let mut gx = vec![0.0; x.numel()];
        let mut gnum = vec![0.0; num.numel()];
        let mut gden = vec![0.0; den.numel()];
        let mut gscale = vec![0.0; scale.numel()];
        for (e, &v) in x.data().iter().enumerate() {
            let gi = self.group_of(e % c, c);
            let a = &num.data()[gi * m1..(gi + 1) * m1];
            let w = scale.data()[gi];
            let p = horner(a, v);
            let inner = inner_poly(b, v);
            let q = 1.0 + inner.abs();
            let sign = if inner > 0.0 {
                1.0
            } else if inner < 0.0 {
                -1.0
            } else {
                0.0
            };
            let ge = g[e];
            gscale[gi] += ge * p / q;
            let mut pw = 1.0;
            for i in 0..m1 {
                gnum[gi * m1 + i] += ge * w * pw / q;
                pw *= v;
            }
            let common = -ge * w * p / (q * q) * sign;
            let mut pw = v;
            for gd in gden.iter_mut() {
                *gd += common * pw;
                pw *= v;
            }
            // d inner / dx = Σ j b_j x^(j-1)
            let dinner = horner_deriv(&[&[0.0], b].concat(), v);
            let dp = horner_deriv(a, v);
            gx[e] = ge * w * (dp * q - p * sign * dinner) / (q * q);
        }
        vec![gx, gnum, gden, gscale]
    }
}

/// Records a grouped Padé unit on the graph.
pub fn grouped_pau(
    g: &mut Graph,
    x: Var,
    numerators: Var,
    denominator: Var,
    scales: Var,
) -> Result<Var> {
    let groups = g.shape(scales).first().copied().unwrap_or(0);
    let channels = g.shape(x).last().copied().unwrap_or(0);
    let num_shape = g.shape(numerators).to_vec();
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "{channels} channels cannot be split into {groups} Padé groups"
        )));
    }
    if num_shape.len() != 2 || num_shape[0] != groups || num_shape[1] < 2 {
        return dim_err(format!(
            "Padé numerators must be [{groups} × (m+1)], got {num_shape:?}"
        ));
    }
    if g.shape(denominator).len() != 1 || g.shape(denominator)[0] == 0 {
        return dim_err("Padé denominator must be a non-empty vector");
    }
    g.custom(
        Box::new(GroupedPau { groups }),
        &[x, numerators, denominator, scales],
    )
}

/// Configuration of a [`PkanBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct PkanConfig {
    pub groups: usize,
    pub num_order: usize,
    pub den_order: usize,
    /// Add a per-channel spline term next to the rational activation.
    pub keep_spline: bool,
    pub grid: BSplineGrid,
}

impl Default for PkanConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            num_order: 5,
            den_order: 4,
            keep_spline: true,
            grid: BSplineGrid::uniform(-1.0, 1.0, 5, 3).expect("valid default grid"),
        }
    }
}

/// linear → grouped Padé activation → linear, shape preserving.
#[derive(Clone, Debug)]
pub struct PkanBlock {
    pub dim: usize,
    pub hidden: usize,
    pub cfg: PkanConfig,
    pub lin1: Linear,
    pub lin2: Linear,
    /// `[g × (m+1)]`
    pub numerators: ParamId,
    /// `[n]`, shared by all groups
    pub denominator: ParamId,
    /// `[g]`
    pub scales: ParamId,
    /// `[hidden × (G+k)]` and `[hidden]` when `keep_spline`.
    pub spline: Option<(ParamId, ParamId)>,
}

impl PkanBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        cfg: PkanConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.groups == 0 || hidden % cfg.groups != 0 {
            return Err(Error::Config(format!(
                "PKAN hidden width {hidden} is not divisible by {} groups",
                cfg.groups
            )));
        }
        if cfg.num_order < 1 || cfg.den_order < 1 {
            return Err(Error::Config("Padé orders must be at least 1".into()));
        }
        let (m1, n) = (cfg.num_order + 1, cfg.den_order);
        let mut num = Vec::with_capacity(cfg.groups * m1);
        for _ in 0..cfg.groups {
            num.extend((0..m1).map(|i| SILU_PAU_NUMERATOR.get(i).copied().unwrap_or(0.0)));
        }
        let den: Vec<f64> = (0..n)
            .map(|i| SILU_PAU_DENOMINATOR.get(i).copied().unwrap_or(0.0))
            .collect();
        let lin1 = Linear::new(store, &format!("{name}.lin1"), dim, hidden, rng);
        let numerators = store.add(
            format!("{name}.pau_num"),
            Tensor::new(&[cfg.groups, m1], num)?,
        );
        let denominator = store.add(format!("{name}.pau_den"), Tensor::vector(den)?);
        let scales = store.full(format!("{name}.pau_scale"), &[cfg.groups], 1.0);
        let spline = cfg.keep_spline.then(|| {
            let nb = cfg.grid.num_basis();
            (
                store.uniform(format!("{name}.spline_coeffs"), &[hidden, nb], 0.1, rng),
                store.full(format!("{name}.spline_w"), &[hidden], 1.0),
            )
        });
        let lin2 = Linear::new(store, &format!("{name}.lin2"), hidden, dim, rng);
        Ok(Self {
            dim,
            hidden,
            cfg,
            lin1,
            lin2,
            numerators,
            denominator,
            scales,
            spline,
        })
    }

    pub fn num_params(&self) -> usize {
        let g = self.cfg.groups;
        let mut n = self.lin1.num_params()
            + self.lin2.num_params()
            + g * (self.cfg.num_order + 1)
            + self.cfg.den_order
            + g;
        if self.spline.is_some() {
            n += self.hidden * (self.cfg.grid.num_basis() + 1);
        }
        n
    }

    /// The activation between the two linear maps, on `h:[N × hidden]`.
    pub fn activation(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let num = g.param(store, self.numerators);
        let den = g.param(store, self.denominator);
        let sc = g.param(store, self.scales);
        let mut a = grouped_pau(g, h, num, den, sc)?;
        if let Some((coeffs, w)) = self.spline {
            let rows = g.shape(h)[0];
            let coeffs = g.param(store, coeffs);
            let w = g.param(store, w);
            let basis = basis_expand(g, h, &self.cfg.grid)?;
            let w2 = g.reshape(w, &[self.hidden, 1])?;
            let weighted = g.mul(coeffs, w2)?;
            let prod = g.mul(basis, weighted)?;
            let s = g.sum(prod, 2)?;
            debug_assert_eq!(g.shape(s), &[rows, self.hidden]);
            a = g.add(a, s)?;
        }
        Ok(a)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.dim {
            return dim_err(format!("PKAN expects width {}, got {d}", self.dim));
        }
        let h = self.lin1.forward(g, store, x)?;
        let a = self.activation(g, store, h)?;
        self.lin2.forward(g, store, a)
    }
}

/// Two-layer perceptron with SiLU, the ablation baseline.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.lin1.num_params() + self.lin2.num_params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.lin1.n_in {
            return dim_err(format!("MLP expects width {}, got {d}", self.lin1.n_in));
        }
        let h = self.lin1.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.lin2.forward(g, store, h)
    }
}

/// Which feed-forward block fills the PKAN slots (ablation axis).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FfnKind {
    Mlp,
    Kan,
    #[default]
    Pkan,
}

impl std::str::FromStr for FfnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "kan" => Ok(Self::Kan),
            "pkan" => Ok(Self::Pkan),
            _ => Err(Error::Config(format!("unknown feed-forward kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for FfnKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Kan => "kan",
            Self::Pkan => "pkan",
        })
    }
}

/// A shape-preserving feed-forward block of any [`FfnKind`].
#[derive(Clone, Debug)]
pub enum FeedForward {
    Mlp(Mlp),
    /// Two KAN layers `dim → hidden → dim`.
    Kan(KanLinear, KanLinear),
    Pkan(PkanBlock),
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: FfnKind,
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        pkan: &PkanConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            FfnKind::Mlp => Self::Mlp(Mlp::new(store, name, dim, hidden, rng)),
            FfnKind::Kan => Self::Kan(
                KanLinear::new(store, &format!("{name}.kan1"), dim, hidden, pkan.grid.clone(), rng),
                KanLinear::new(store, &format!("{name}.kan2"), hidden, dim, pkan.grid.clone(), rng),
            ),
            FfnKind::Pkan => Self::Pkan(PkanBlock::new(store, name, dim, hidden, pkan.clone(), rng)?),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::Mlp(m) => m.forward(g, store, x),
            Self::Kan(a, b) => {
                let h = a.forward(g, store, x)?;
                b.forward(g, store, h)
            }
            Self::Pkan(p) => p.forward(g, store, x),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Mlp(m) => m.num_params(),
            Self::Kan(a, b) => a.num_params() + b.num_params(),
            Self::Pkan(p) => p.num_params(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook recursive Cox–de Boor, independent of the iterative code.
    fn cox_de_boor(t: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return f64::from(u8::from(t[i] <= x && x < t[i + 1]));
        }
        let mut v = 0.0;
        let d1 = t[i + k] - t[i];
        if d1 != 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(t, i, k - 1, x);
        }
        let d2 = t[i + k + 1] - t[i + 1];
        if d2 != 0.0 {
            v += (t[i + k + 1] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn grid_shape_and_errors() {
        let g = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.num_basis(), 8);
        assert!(matches!(BSplineGrid::uniform(-1.0, 1.0, 0, 3), Err(Error::Config(_))));
        assert!(matches!(BSplineGrid::uniform(-1.0, 1.0, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_of_unity_spot() {
        let g = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        for i in 0..=100 {
            let x = -1.0 + 0.02 * i as f64;
            let b = g.basis(x);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn boundary_values_at_lo() {
        // Strictly increasing uniform knots: at x = lo the cubic basis takes
        // the cardinal values 1/6, 2/3, 1/6 on the first three functions.
        let g = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        let b = g.basis(-1.0);
        let expect = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0];
        for (v, e) in b.iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        // Clamped below the range.
        assert_eq!(g.basis(-7.0), b);
        assert_eq!(g.basis(9.0), g.basis(1.0));
    }

    #[test]
    fn midpoint_matches_recursive_oracle() {
        let g = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        for x in [0.0, 0.1, -0.37, 0.61, 0.99] {
            let b = g.basis(x);
            for (i, &v) in b.iter().enumerate() {
                let o = cox_de_boor(g.knots(), i, 3, x);
                assert!((v - o).abs() < 1e-14, "x={x} i={i}: {v} vs {o}");
            }
        }
    }

    #[test]
    fn basis_derivative_matches_finite_difference() {
        let g = BSplineGrid::uniform(-1.0, 1.0, 4, 3).unwrap();
        let mut d = vec![0.0; g.num_basis()];
        for x in [-0.83, -0.2, 0.05, 0.77] {
            g.basis_deriv_into(x, &mut d);
            let h = 1e-6;
            let (p, m) = (g.basis(x + h), g.basis(x - h));
            for i in 0..d.len() {
                let fd = (p[i] - m[i]) / (2.0 * h);
                assert!((fd - d[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kan_phi_cases() {
        let grid = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        let ones = vec![1.0; grid.num_basis()];
        let e = KanEdge {
            w_b: 1.0,
            w_s: 0.0,
            coeffs: &ones,
            grid: &grid,
        };
        assert_eq!(kan_phi(0.0, &e, &BaseActivation::Silu), 0.0);
        let e = KanEdge {
            w_b: 0.0,
            w_s: 1.0,
            coeffs: &ones,
            grid: &grid,
        };
        assert!((kan_phi(0.42, &e, &BaseActivation::Silu) - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs: Vec<f64> = (0..grid.num_basis()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = KanEdge {
            w_b: 0.7,
            w_s: -1.3,
            coeffs: &coeffs,
            grid: &grid,
        };
        let x = 0.37;
        let spline: f64 = (0..grid.num_basis())
            .map(|i| coeffs[i] * cox_de_boor(grid.knots(), i, 3, x))
            .sum();
        let expect = 0.7 * x / (1.0 + (-x).exp()) - 1.3 * spline;
        assert!((kan_phi(x, &e, &BaseActivation::Silu) - expect).abs() < 1e-14);
    }

    #[test]
    fn pau_cases() {
        let p = PauParams::new(vec![0.3, 2.0, -1.0], vec![0.5, 0.25], 1.5).unwrap();
        assert_eq!(p.eval(0.0), 1.5 * 0.3);
        let id = PauParams::new(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; 4], 1.0).unwrap();
        for x in [-3.0, -0.5, 0.0, 2.25] {
            assert_eq!(id.eval(x), x);
        }
        assert!(PauParams::new(vec![1.0], vec![1.0], 1.0).is_err());
        assert!(PauParams::new(vec![1.0, 1.0], vec![], 1.0).is_err());
        assert_eq!(PauParams::silu_init().orders(), (5, 4));
    }

    #[test]
    fn silu_fit_within_tenth() {
        let p = PauParams::silu_init();
        let worst = (0..=6000)
            .map(|i| -3.0 + i as f64 * 1e-3)
            .map(|x| (p.eval(x) - silu(x)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.1, "{worst}");
        assert!(worst < 1e-5);
    }

    #[test]
    fn pkan_rejects_uneven_groups() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PkanConfig {
            groups: 3,
            ..PkanConfig::default()
        };
        let r = PkanBlock::new(&mut store, "p", 4, 4, cfg, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn kan_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = BSplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
        let l = KanLinear::new(&mut store, "k", 6, 3, grid, &mut rng);
        assert_eq!(l.num_params(), 6 * 3 * 10);
        assert_eq!(store.numel(), l.num_params());
    }
}
