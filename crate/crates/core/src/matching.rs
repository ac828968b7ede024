//! One-to-one assignment of predictions to ground truth and the set loss
//! built on it.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Weight of the coordinate term in [`training_loss`].
pub const LAMBDA_COORD: f64 = 5.0;
/// Weight of the confidence term in [`training_loss`].
pub const LAMBDA_CONF: f64 = 1.0;

/// `‖g − p‖₁ − confidence`. Negative when a confident prediction sits on
/// its target.
pub fn match_cost(pred: [f64; 2], confidence: f64, gt: [f64; 2]) -> f64 {
    (gt[0] - pred[0]).abs() + (gt[1] - pred[1]).abs() - confidence
}

/// Dense row-major costs, rows = ground truth, cols = predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!("{rows}×{cols} cost matrix needs {} entries, got {}", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Costs of [`match_cost`] for every ground-truth/prediction pair.
    pub fn from_points(preds: &[[f64; 2]], confidence: &[f64], gt: &[[f64; 2]]) -> Result<Self> {
        if preds.len() != confidence.len() {
            return dim_err(format!(
                "{} predictions but {} confidences",
                preds.len(),
                confidence.len()
            ));
        }
        Self::from_fn(gt.len(), preds.len(), |i, j| match_cost(preds[j], confidence[j], gt[i]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the prediction matched to ground truth `i`.
    pub assignment: Vec<usize>,
    /// Sum of the matched entries, accumulated in row order.
    pub total_cost: f64,
    /// Predictions left without a partner, ascending.
    pub unmatched: Vec<usize>,
}

/// Exact minimum-cost assignment of every row to a distinct column
/// (shortest augmenting paths with potentials, `O(rows²·cols)`).
pub fn hungarian(c: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (c.rows, c.cols);
    if n > m {
        return Err(Error::Infeasible { rows: n, cols: m });
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    let mut unmatched = Vec::with_capacity(m - n);
    for j in 1..=m {
        if p[j] == 0 {
            unmatched.push(j - 1);
        } else {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
    Ok(MatchResult {
        assignment,
        total_cost,
        unmatched,
    })
}

/// Matches predictions to `gt` and records the set loss
/// `5 · mean L1 over matched pairs + 1 · mean BCE over all predictions`,
/// with target 1 for matched predictions and 0 otherwise. The assignment is
/// computed from current values and treated as constant.
///
/// `coords:[M×2]` and `logits:[M]`; `gt` in the same frame as `coords`.
/// Matching costs are evaluated after multiplying both point sets by
/// `extent` (the image size for normalized inputs), so the confidence term
/// only separates candidates at similar pixel distances.
pub fn training_loss(
    g: &mut Graph,
    coords: Var,
    logits: Var,
    gt: &[[f64; 2]],
    extent: [f64; 2],
) -> Result<(Var, MatchResult)> {
    let (m, two) = g.value(coords).dims2()?;
    if two != 2 || g.shape(logits) != [m] {
        return dim_err(format!(
            "loss expects coords [M×2] and logits [M], got {:?} and {:?}",
            g.shape(coords),
            g.shape(logits)
        ));
    }
    let scale = |p: &[f64]| [p[0] * extent[0], p[1] * extent[1]];
    let pts: Vec<[f64; 2]> = g.data(coords).chunks(2).map(scale).collect();
    let gt_px: Vec<[f64; 2]> = gt.iter().map(|p| scale(p)).collect();
    let conf: Vec<f64> = g.data(logits).iter().map(|&z| crate::autodiff::sigmoid(z)).collect();
    let costs = CostMatrix::from_points(&pts, &conf, &gt_px)?;
    let matched = hungarian(&costs)?;

    let mut targets = vec![0.0; m];
    for &j in &matched.assignment {
        targets[j] = 1.0;
    }
    let bce = g.bce_with_logits(logits, &targets)?;
    let conf_loss = g.mean_all(bce)?;
    let conf_loss = g.scale(conf_loss, LAMBDA_CONF)?;
    if gt.is_empty() {
        return Ok((conf_loss, matched));
    }

    let chosen = g.gather_rows(coords, &matched.assignment)?;
    let target = g.constant(Tensor::new(&[gt.len(), 2], gt.iter().flatten().copied().collect())?);
    let diff = g.sub(chosen, target)?;
    let l1 = g.abs(diff)?;
    let l1 = g.sum_all(l1)?;
    let coord_loss = g.scale(l1, LAMBDA_COORD / gt.len() as f64)?;
    Ok((g.add(coord_loss, conf_loss)?, matched))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_cases() {
        assert_eq!(match_cost([0.2, 0.7], 0.9, [0.2, 0.7]), -0.9);
        assert!((match_cost([0.0, 0.0], 0.0, [0.3, 0.4]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn small_assignments() {
        let c = CostMatrix::new(1, 1, vec![4.0]).unwrap();
        assert_eq!(hungarian(&c).unwrap().assignment, vec![0]);
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let r = hungarian(&c).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        assert_eq!(r.total_cost, 2.0);
        let c = CostMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Infeasible { rows: 2, cols: 1 })));
        let c = CostMatrix::new(0, 3, vec![]).unwrap();
        assert_eq!(hungarian(&c).unwrap().unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lowest_column() {
        let c = CostMatrix::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(hungarian(&c).unwrap().assignment, vec![0]);
    }
}
