//! Localization, counting and plant-spacing metrics.

use crate::error::{dim_err, Error, Result};
use crate::matching::{hungarian, CostMatrix};
use crate::synthfield::Point;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Distance thresholds α in pixels, ascending.
    pub thresholds: Vec<u32>,
    /// Ground sampling distance, mm per pixel.
    pub gsd_mm: f64,
    /// Confidence above which a prediction counts.
    pub tau: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..=10).collect(),
            gsd_mm: 2.38,
            tau: 0.5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds[0] == 0
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "thresholds must be positive and ascending, got {:?}",
                self.thresholds
            )));
        }
        if !(self.gsd_mm > 0.0) {
            return Err(Error::Config(format!("gsd must be positive, got {}", self.gsd_mm)));
        }
        Ok(())
    }
}

pub fn px_to_cm(px: f64, gsd_mm: f64) -> f64 {
    px * gsd_mm / 10.0
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Matched `(gt, pred)` pairs within `alpha` under an assignment that
/// maximizes their number, ties broken by smallest total distance.
pub fn threshold_matches(pred: &[Point], gt: &[Point], alpha: f64) -> Vec<(usize, usize)> {
    if pred.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    // Any pair beyond alpha costs more than every within-alpha pair together,
    // so the optimum first maximizes the number of close pairs.
    let big = alpha * (gt.len().min(pred.len()) + 1) as f64 + 1.0;
    let cost = |g: Point, p: Point| {
        let d = dist(g, p);
        if d <= alpha {
            d
        } else {
            big
        }
    };
    let transpose = gt.len() > pred.len();
    let c = if transpose {
        CostMatrix::from_fn(pred.len(), gt.len(), |i, j| cost(gt[j], pred[i]))
    } else {
        CostMatrix::from_fn(gt.len(), pred.len(), |i, j| cost(gt[i], pred[j]))
    }
    .expect("finite distances");
    let m = hungarian(&c).expect("rows never exceed columns");
    m.assignment
        .iter()
        .enumerate()
        .map(|(r, &col)| if transpose { (col, r) } else { (r, col) })
        .filter(|&(gi, pi)| dist(gt[gi], pred[pi]) <= alpha)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdScore {
    pub alpha: u32,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub per_alpha: Vec<ThresholdScore>,
    pub avp: f64,
    pub avr: f64,
    pub avf: f64,
}

impl LocalizationReport {
    pub fn at(&self, alpha: u32) -> Option<&ThresholdScore> {
        self.per_alpha.iter().find(|s| s.alpha == alpha)
    }
}

/// Sums TP/FP/FN over images; scores are computed from the pooled counts.
#[derive(Clone, Debug)]
pub struct LocalizationAccumulator {
    thresholds: Vec<u32>,
    counts: Vec<Counts>,
}

impl LocalizationAccumulator {
    pub fn new(cfg: &MetricConfig) -> Self {
        Self {
            thresholds: cfg.thresholds.clone(),
            counts: vec![Counts::default(); cfg.thresholds.len()],
        }
    }

    pub fn add(&mut self, pred: &[Point], gt: &[Point]) {
        for (alpha, c) in self.thresholds.iter().zip(&mut self.counts) {
            let tp = threshold_matches(pred, gt, *alpha as f64).len();
            c.tp += tp;
            c.fp += pred.len() - tp;
            c.fn_ += gt.len() - tp;
        }
    }

    pub fn report(&self) -> LocalizationReport {
        let per_alpha: Vec<ThresholdScore> = self
            .thresholds
            .iter()
            .zip(&self.counts)
            .map(|(&alpha, &counts)| ThresholdScore {
                alpha,
                counts,
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
            })
            .collect();
        let n = per_alpha.len().max(1) as f64;
        let mean = |f: fn(&ThresholdScore) -> f64| per_alpha.iter().map(f).sum::<f64>() / n;
        LocalizationReport {
            avp: mean(|s| s.precision),
            avr: mean(|s| s.recall),
            avf: mean(|s| s.f1),
            per_alpha,
        }
    }
}

/// Precision, recall and F1 per threshold plus their unweighted means.
/// Ratios with a zero denominator are 0.
pub fn localization_metrics(pred: &[Point], gt: &[Point], cfg: &MetricConfig) -> LocalizationReport {
    let mut acc = LocalizationAccumulator::new(cfg);
    acc.add(pred, gt);
    acc.report()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountingReport {
    pub mae: f64,
    pub mse: f64,
    /// `sqrt(mse)`, the figure often reported as "MSE" in counting work.
    pub rmse: f64,
}

pub fn counting_metrics(predicted: &[f64], truth: &[f64]) -> Result<CountingReport> {
    if predicted.len() != truth.len() {
        return dim_err(format!(
            "{} predicted counts but {} ground-truth counts",
            predicted.len(),
            truth.len()
        ));
    }
    if predicted.is_empty() {
        return Ok(CountingReport {
            mae: 0.0,
            mse: 0.0,
            rmse: 0.0,
        });
    }
    let n = predicted.len() as f64;
    let mae = predicted.iter().zip(truth).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = predicted.iter().zip(truth).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    Ok(CountingReport {
        mae,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Row partition and neighbour distances of a point set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpacingEstimate {
    /// Point indices per row, ordered along the row axis.
    pub rows: Vec<Vec<usize>>,
    /// Consecutive pairs within rows.
    pub pairs: Vec<(usize, usize)>,
    pub distances_px: Vec<f64>,
    pub distances_cm: Vec<f64>,
}

/// Unit vector along the dominant direction of the point covariance.
pub fn principal_axis(points: &[Point]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    [theta.cos(), theta.sin()]
}

/// Axial mean of the directions from each point to its nearest neighbour.
/// Falls back to [`principal_axis`] when those directions cancel out.
pub fn row_axis(points: &[Point]) -> [f64; 2] {
    let (mut c2, mut s2) = (0.0, 0.0);
    for (i, &p) in points.iter().enumerate() {
        let nearest = points
            .iter()
            .enumerate()
            .filter(|&(j, &q)| j != i && q != p)
            .min_by(|a, b| dist(p, *a.1).total_cmp(&dist(p, *b.1)));
        if let Some((_, &q)) = nearest {
            let theta = (q[1] - p[1]).atan2(q[0] - p[0]);
            c2 += (2.0 * theta).cos();
            s2 += (2.0 * theta).sin();
        }
    }
    if c2.hypot(s2) < 1e-9 * points.len() as f64 {
        return principal_axis(points);
    }
    let theta = 0.5 * s2.atan2(c2);
    [theta.cos(), theta.sin()]
}

/// Splits points into rows and measures neighbour distances within each.
///
/// Rows run along [`row_axis`]; points whose perpendicular
/// coordinates differ by more than half of `row_spacing_px` from the
/// previous one start a new row.
pub fn spacing_estimate(points: &[Point], gsd_mm: f64, row_spacing_px: f64) -> SpacingEstimate {
    if points.len() < 2 {
        return SpacingEstimate::default();
    }
    let [ax, ay] = row_axis(points);
    let along = |p: Point| p[0] * ax + p[1] * ay;
    let across = |p: Point| -p[0] * ay + p[1] * ax;

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| across(points[a]).total_cmp(&across(points[b])));
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for i in order {
        let c = across(points[i]);
        if rows.is_empty() || c - last > 0.5 * row_spacing_px {
            rows.push(Vec::new());
        }
        rows.last_mut().expect("row pushed").push(i);
        last = c;
    }
    let mut est = SpacingEstimate::default();
    for row in &mut rows {
        row.sort_by(|&a, &b| along(points[a]).total_cmp(&along(points[b])));
        for w in row.windows(2) {
            let d = dist(points[w[0]], points[w[1]]);
            est.pairs.push((w[0], w[1]));
            est.distances_px.push(d);
            est.distances_cm.push(px_to_cm(d, gsd_mm));
        }
    }
    est.rows = rows;
    est
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpacingReport {
    pub rmse: f64,
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    pub pairs: usize,
}

/// RMSE between paired distances and the R² of the least-squares line of
/// `estimated` on `reference`.
pub fn spacing_accuracy(estimated: &[f64], reference: &[f64]) -> Result<SpacingReport> {
    if estimated.len() != reference.len() {
        return dim_err(format!(
            "{} estimated distances but {} reference distances",
            estimated.len(),
            reference.len()
        ));
    }
    let n = estimated.len();
    if n < 2 {
        return dim_err(format!("R² needs at least 2 pairs, got {n}"));
    }
    let nf = n as f64;
    let rmse = (estimated.iter().zip(reference).map(|(e, r)| (e - r).powi(2)).sum::<f64>() / nf).sqrt();
    let me = estimated.iter().sum::<f64>() / nf;
    let mr = reference.iter().sum::<f64>() / nf;
    let sxx: f64 = reference.iter().map(|r| (r - mr).powi(2)).sum();
    let sxy: f64 = reference.iter().zip(estimated).map(|(r, e)| (r - mr) * (e - me)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = me - slope * mr;
    let ss_res: f64 = reference
        .iter()
        .zip(estimated)
        .map(|(r, e)| (e - (intercept + slope * r)).powi(2))
        .sum();
    let ss_tot: f64 = estimated.iter().map(|e| (e - me).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(SpacingReport {
        rmse,
        r_squared,
        slope,
        intercept,
        pairs: n,
    })
}

/// Distance pairs for predictions against annotated neighbours: each
/// reference pair `(a, b)` of `gt` whose endpoints both have a prediction
/// within `alpha` contributes `(|p_a − p_b|, |g_a − g_b|)`, in pixels.
pub fn paired_spacing(pred: &[Point], gt: &[Point], adjacent: &[(usize, usize)], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let mut partner = vec![None; gt.len()];
    for (gi, pi) in threshold_matches(pred, gt, alpha) {
        partner[gi] = Some(pi);
    }
    let mut est = Vec::new();
    let mut reference = Vec::new();
    for &(a, b) in adjacent {
        if let (Some(Some(pa)), Some(Some(pb))) = (partner.get(a), partner.get(b)) {
            est.push(dist(pred[*pa], pred[*pb]));
            reference.push(dist(gt[a], gt[b]));
        }
    }
    (est, reference)
}
