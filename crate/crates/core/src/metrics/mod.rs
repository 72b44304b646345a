//! Accuracy and calibration of an aggregated predictive distribution against
//! a hard truth mask, plus paired significance testing across cases.
//!
//! Every function is pure. Probability fields are `[B, C, H, W]`; truth and
//! predicted masks are class indices laid out `[B, H, W]`.

mod report;

pub use report::{compare, per_case_csv, summarize, CaseResult, MetricComparison, Report, Summary, METRICS};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ndgrad::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("not a probability field: {0}")]
    NotNormalized(String),
    #[error("{0}")]
    Invalid(String),
}

/// Lower clamp on the probability of the true class before the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a channel sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// `2|P ∩ G| / (|P| + |G|)` for class `c`; 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Shape(format!("{} predicted vs {} true pixels", pred.len(), truth.len())));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a == class, b == class);
        p += usize::from(a);
        g += usize::from(b);
        both += usize::from(a && b);
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// Dice for every class, and the mean over the foreground classes `1..C`.
pub fn dice_per_class(pred: &[u8], truth: &[u8], classes: usize) -> Result<(Vec<f64>, f64), MetricError> {
    let per: Vec<f64> = (0..classes).map(|c| dice(pred, truth, c as u8)).collect::<Result<_, _>>()?;
    let fg = if classes > 1 {
        per[1..].iter().sum::<f64>() / (classes - 1) as f64
    } else {
        per[0]
    };
    Ok((per, fg))
}

/// Per-pixel probability vectors of a `[B, C, H, W]` field, checked against
/// the truth layout and the simplex.
struct Pixels<'a, T> {
    data: &'a [T],
    classes: usize,
    hw: usize,
    n: usize,
}

impl<'a, T: Real> Pixels<'a, T> {
    fn new(p: &'a Tensor<T>, truth: &[u8]) -> Result<Self, MetricError> {
        let (b, c, h, w) = p.dims4("probability field").map_err(|e| MetricError::Shape(e.to_string()))?;
        let (hw, n) = (h * w, b * h * w);
        if truth.len() != n {
            return Err(MetricError::Shape(format!("{} truth pixels for a field of shape {:?}", truth.len(), p.shape())));
        }
        if let Some(k) = truth.iter().find(|&&k| usize::from(k) >= c) {
            return Err(MetricError::Shape(format!("truth class {k} with only {c} channels")));
        }
        let px = Self { data: p.data(), classes: c, hw, n };
        for i in 0..n {
            let sum: f64 = (0..c).map(|k| px.prob(i, k)).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || (0..c).any(|k| px.prob(i, k) < -SIMPLEX_TOLERANCE) {
                return Err(MetricError::NotNormalized(format!("pixel {i} sums to {sum}")));
            }
        }
        Ok(px)
    }

    fn prob(&self, i: usize, k: usize) -> f64 {
        let (b, p) = (i / self.hw, i % self.hw);
        self.data[(b * self.classes + k) * self.hw + p].to_f64_lossless()
    }

    /// Highest probability and its class; ties go to the lowest index.
    fn top(&self, i: usize) -> (f64, usize) {
        (1..self.classes).fold((self.prob(i, 0), 0), |(best, arg), k| {
            let v = self.prob(i, k);
            if v > best {
                (v, k)
            } else {
                (best, arg)
            }
        })
    }
}

/// Mean over pixels of `-ln p[true class]`, in nats.
pub fn nll<T: Real>(p: &Tensor<T>, truth: &[u8]) -> Result<f64, MetricError> {
    let px = Pixels::new(p, truth)?;
    let total: f64 = truth
        .iter()
        .enumerate()
        .map(|(i, &k)| -px.prob(i, usize::from(k)).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / px.n as f64)
}

/// One equal-width confidence bin of a reliability diagram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean correctness; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
}

/// Confidence is the top probability, correctness whether its class is the
/// true one. Bin `k` holds confidences in `[k/bins, (k+1)/bins)`, the last
/// bin closed at 1.
pub fn reliability<T: Real>(p: &Tensor<T>, truth: &[u8], bins: usize) -> Result<Vec<ReliabilityBin>, MetricError> {
    if bins == 0 {
        return Err(MetricError::Invalid("at least one bin is required".into()));
    }
    let px = Pixels::new(p, truth)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (i, &k) in truth.iter().enumerate() {
        let (c, arg) = px.top(i);
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        correct[b] += f64::from(u8::from(arg == usize::from(k)));
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy: correct[b] / n,
                confidence: conf[b] / n,
            }
        })
        .collect())
}

/// `Σ_b (n_b / N) |acc_b - conf_b|`; empty bins contribute nothing.
pub fn ece<T: Real>(p: &Tensor<T>, truth: &[u8], bins: usize) -> Result<f64, MetricError> {
    let table = reliability(p, truth, bins)?;
    let n: usize = table.iter().map(|b| b.count).sum();
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Rank correlation; `degenerate` marks a constant side, where the value is
/// defined as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} observations", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(MetricError::Invalid("a rank correlation needs at least 2 observations".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation {
        value: sab / (saa * sbb).sqrt(),
        degenerate: false,
    })
}

/// Predictive entropy per pixel, in nats.
pub fn entropy<T: Real>(p: &Tensor<T>, truth_layout: &[u8]) -> Result<Vec<f64>, MetricError> {
    let px = Pixels::new(p, truth_layout)?;
    Ok((0..px.n)
        .map(|i| {
            (0..px.classes)
                .map(|k| px.prob(i, k))
                .filter(|&q| q > 0.0)
                .map(|q| -q * q.ln())
                .sum()
        })
        .collect())
}

/// Spearman correlation between per-pixel entropy and the 0/1 error of the
/// argmax prediction.
pub fn err_uncert_corr<T: Real>(p: &Tensor<T>, truth: &[u8]) -> Result<Correlation, MetricError> {
    let h = entropy(p, truth)?;
    let px = Pixels::new(p, truth)?;
    let err: Vec<f64> = truth
        .iter()
        .enumerate()
        .map(|(i, &k)| f64::from(u8::from(px.top(i).1 != usize::from(k))))
        .collect();
    spearman(&h, &err)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    /// Mean of `a - b`.
    pub mean_difference: f64,
}

/// Paired t-test on `a[i] - b[i]` with `n - 1` degrees of freedom. All-zero
/// differences give `t = 0, p = 1`; constant nonzero differences give an
/// infinite `t` and `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(MetricError::Invalid("a paired t-test needs at least 2 pairs".into()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if d.iter().all(|&x| x == 0.0) || mean == 0.0 {
        return Ok(TTest { t: 0.0, p: 1.0, df, mean_difference: mean });
    }
    if var == 0.0 {
        return Ok(TTest {
            t: f64::INFINITY.copysign(mean),
            p: 0.0,
            df,
            mean_difference: mean,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| MetricError::Invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df, mean_difference: mean })
}
