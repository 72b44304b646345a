use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{dice_per_class, ece, err_uncert_corr, nll, paired_t_test, MetricError, TTest};
use crate::ndgrad::{Real, Tensor};

/// Report keys, in output order.
pub const METRICS: [&str; 4] = ["dsc", "nll", "ece", "corr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    /// Dice of every class, background first.
    pub dsc: Vec<f64>,
    /// Mean over foreground classes.
    pub dsc_mean: f64,
    pub nll: f64,
    pub ece: f64,
    pub corr: f64,
    pub corr_degenerate: bool,
    pub samples: usize,
}

impl CaseResult {
    /// Score one case: `probs` is `[1, C, H, W]`, `mask` the predicted
    /// classes and `truth` the reference classes.
    pub fn evaluate<T: Real>(
        case: usize,
        probs: &Tensor<T>,
        mask: &[u8],
        truth: &[u8],
        samples: usize,
        bins: usize,
    ) -> Result<Self, MetricError> {
        let classes = probs.shape().get(1).copied().unwrap_or(0);
        let (dsc, dsc_mean) = dice_per_class(mask, truth, classes)?;
        let corr = err_uncert_corr(probs, truth)?;
        Ok(Self {
            case,
            dsc,
            dsc_mean,
            nll: nll(probs, truth)?,
            ece: ece(probs, truth, bins)?,
            corr: corr.value,
            corr_degenerate: corr.degenerate,
            samples,
        })
    }

    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "dsc" => self.dsc_mean,
            "nll" => self.nll,
            "ece" => self.ece,
            "corr" => self.corr,
            other => panic!("unknown metric {other}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation, `n - 1` denominator; 0 for one case.
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Result<Self, MetricError> {
        if xs.is_empty() {
            return Err(MetricError::Invalid("cannot summarize zero cases".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }
}

/// Mean and spread over cases of every metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub dsc: Summary,
    pub nll: Summary,
    pub ece: Summary,
    pub corr: Summary,
}

pub fn summarize(results: &[CaseResult]) -> Result<Report, MetricError> {
    let of = |name: &str| Summary::of(&results.iter().map(|r| r.metric(name)).collect::<Vec<_>>());
    Ok(Report {
        dsc: of("dsc")?,
        nll: of("nll")?,
        ece: of("ece")?,
        corr: of("corr")?,
    })
}

impl Report {
    pub fn get(&self, name: &str) -> Summary {
        match name {
            "dsc" => self.dsc,
            "nll" => self.nll,
            "ece" => self.ece,
            "corr" => self.corr,
            other => panic!("unknown metric {other}"),
        }
    }

    /// Aligned text table, one row per named report. With `percent` the
    /// DSC, NLL and ECE columns are multiplied by 100 for display only.
    pub fn table(rows: &[(&str, Report)], percent: bool) -> String {
        let scale = if percent { 100.0 } else { 1.0 };
        let unit = if percent { "(%)" } else { "" };
        let headers = [
            "model".to_string(),
            format!("DSC{unit}"),
            format!("NLL{unit}"),
            format!("ECE{unit}"),
            "corr".to_string(),
        ];
        let cell = |s: Summary, k: f64| format!("{:.3} ± {:.3}", s.mean * k, s.std * k);
        let body: Vec<[String; 5]> = rows
            .iter()
            .map(|(name, r)| {
                [
                    (*name).to_string(),
                    cell(r.dsc, scale),
                    cell(r.nll, scale),
                    cell(r.ece, scale),
                    cell(r.corr, 1.0),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|c| body.iter().map(|r| r[c].chars().count()).chain([headers[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let pad = widths[c] - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).expect("writing to a String");
        };
        line(&headers);
        for r in &body {
            line(r);
        }
        out
    }
}

/// One row per case: `case,dsc_mean,dsc_0..dsc_{C-1},nll,ece,corr,corr_degenerate,samples`.
pub fn per_case_csv(results: &[CaseResult]) -> String {
    let classes = results.first().map_or(0, |r| r.dsc.len());
    let mut out = String::from("case,dsc_mean");
    for c in 0..classes {
        write!(out, ",dsc_{c}").expect("writing to a String");
    }
    out.push_str(",nll,ece,corr,corr_degenerate,samples\n");
    for r in results {
        write!(out, "{},{}", r.case, r.dsc_mean).expect("writing to a String");
        for d in &r.dsc {
            write!(out, ",{d}").expect("writing to a String");
        }
        writeln!(out, ",{},{},{},{},{}", r.nll, r.ece, r.corr, r.corr_degenerate, r.samples).expect("writing to a String");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    /// `a - b` over matched cases.
    pub test: TTest,
}

/// Paired t-test per metric between two runs over the same cases, matched
/// by case id.
pub fn compare(a: &[CaseResult], b: &[CaseResult]) -> Result<Vec<MetricComparison>, MetricError> {
    let mut ids_a: Vec<usize> = a.iter().map(|r| r.case).collect();
    let mut ids_b: Vec<usize> = b.iter().map(|r| r.case).collect();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    if ids_a != ids_b || ids_a.windows(2).any(|w| w[0] == w[1]) {
        return Err(MetricError::Shape("runs must cover the same distinct cases".into()));
    }
    let by_id = |rs: &[CaseResult], name: &str| -> Vec<f64> {
        ids_a
            .iter()
            .map(|id| rs.iter().find(|r| r.case == *id).expect("ids checked").metric(name))
            .collect()
    };
    METRICS
        .iter()
        .map(|&m| {
            Ok(MetricComparison {
                metric: m.to_string(),
                test: paired_t_test(&by_id(a, m), &by_id(b, m))?,
            })
        })
        .collect()
}
