//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - b| / max(1, |a|, |b|)` over all checked entries.
    pub max_rel_error: f64,
    /// `(input index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check objective".into()))
    }
}

/// Compares the tape gradient of the scalar `f` with the central difference
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every input tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradients populated").to_vec())
        .collect();

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
        tolerance,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}

fn eval_store<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check objective".into()))
    }
}

/// [`grad_check`] over the parameters of a store: `probes` entries drawn
/// without replacement from all parameters (every entry when fewer exist).
/// `worst` reports `(parameter index, flat entry)`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    probes: usize,
    eps: f64,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut grads = Gradients::zeros_like(store);
    g.accumulate_param_grads(&mut grads);

    let entries: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, _, t))| (0..t.numel()).map(move |e| (pi, e)))
        .collect();
    let chosen = sample(rng, entries.len(), probes.min(entries.len()));
    let ids: Vec<_> = store.ids().collect();
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
        tolerance,
    };
    for k in chosen {
        let (pi, ei) = entries[k];
        let id = ids[pi];
        let a = grads.get(id)[ei];
        let orig = probe.get(id).data()[ei];
        probe.data_mut(id)[ei] = orig + eps;
        let plus = eval_store(&f, &probe)?;
        probe.data_mut(id)[ei] = orig - eps;
        let minus = eval_store(&f, &probe)?;
        probe.data_mut(id)[ei] = orig;
        let err = relative_error(a, (plus - minus) / (2.0 * eps));
        report.entries += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((pi, ei));
        }
    }
    Ok(report)
}
