//! Agreement between expert labels and model predictions.
//!
//! Degenerate denominators yield `None` ("undefined") rather than a
//! conventional zero.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("gold and prediction lengths differ ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("no observations")]
    Empty,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("matrix is not square or does not match its labels")]
    Shape,
    #[error("correlation needs at least two observations")]
    TooFewObservations,
}

/// Rows are gold (expert) labels, columns model predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        check_labels(&labels)?;
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(MetricsError::Shape);
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.k()).all(|i| (0..self.k()).all(|j| i == j || self.counts[i][j] == 0))
    }

    fn require_nonempty(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::Empty),
            n => Ok(n as f64),
        }
    }
}

fn check_labels(labels: &[String]) -> Result<(), MetricsError> {
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(MetricsError::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

pub fn confusion<S: AsRef<str>>(
    gold: &[S],
    pred: &[S],
    labels: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_labels(labels)?;
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let lookup = |l: &str| {
        index
            .get(l)
            .copied()
            .ok_or_else(|| MetricsError::UnknownLabel(l.to_string()))
    };
    let k = labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        counts[lookup(g.as_ref())?][lookup(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// One-vs-rest (TP + TN) / n.
    pub accuracy: f64,
    /// Gold count.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
}

pub fn class_metrics(m: &ConfusionMatrix) -> Result<ClassReport, MetricsError> {
    let n = m.require_nonempty()?;
    let total = m.total();
    let per_class = (0..m.k())
        .map(|j| {
            let tp = m.counts[j][j];
            let row = m.row_sum(j);
            let col = m.col_sum(j);
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            let tn = total + tp - row - col;
            ClassMetrics {
                label: m.labels[j].clone(),
                precision,
                recall,
                f1,
                accuracy: (tp + tn) as f64 / n,
                support: row,
            }
        })
        .collect();
    Ok(ClassReport {
        per_class,
        overall_accuracy: m.trace() as f64 / n,
    })
}

/// Cohen's kappa; `None` when chance agreement is 1.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<Option<f64>, MetricsError> {
    let n = m.require_nonempty()?;
    let p_o = m.trace() as f64 / n;
    let p_e: f64 = (0..m.k())
        .map(|j| m.row_sum(j) as f64 * m.col_sum(j) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() <= f64::EPSILON {
        return Ok(None);
    }
    Ok(Some((p_o - p_e) / (1.0 - p_e)))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            gold: x.len(),
            pred: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFewObservations);
    }
    Ok(())
}

/// Product-moment correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>, MetricsError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, MetricsError> {
    check_pair(x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Encodes labels to their 0-based position in `labels`.
pub fn ordinal_codes<S: AsRef<str>>(seq: &[S], labels: &[String]) -> Result<Vec<f64>, MetricsError> {
    seq.iter()
        .map(|s| {
            labels
                .iter()
                .position(|l| l == s.as_ref())
                .map(|i| i as f64)
                .ok_or_else(|| MetricsError::UnknownLabel(s.as_ref().to_string()))
        })
        .collect()
}

pub const ORDINAL_ENCODING_NOTE: &str = "pearson_r and spearman_rho are computed over ordinal codes \
assigned by label order; persona labels are nominal, so these values change if the labels are reordered";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub labels: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
    pub kappa: Option<f64>,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub n: u64,
    pub confusion: ConfusionMatrix,
    pub notes: Vec<String>,
}

impl AgreementReport {
    pub fn from_labels<S: AsRef<str>>(
        gold: &[S],
        pred: &[S],
        labels: &[String],
    ) -> Result<Self, MetricsError> {
        let m = confusion(gold, pred, labels)?;
        let class = class_metrics(&m)?;
        let (pearson_r, spearman_rho) = if gold.len() >= 2 {
            let gx = ordinal_codes(gold, labels)?;
            let px = ordinal_codes(pred, labels)?;
            (pearson(&gx, &px)?, spearman(&gx, &px)?)
        } else {
            (None, None)
        };
        let kappa = cohen_kappa(&m)?;
        let mut notes = vec![ORDINAL_ENCODING_NOTE.to_string()];
        for (what, v) in [("kappa", kappa), ("pearson_r", pearson_r), ("spearman_rho", spearman_rho)] {
            if v.is_none() {
                notes.push(format!("{what} is undefined for this data"));
            }
        }
        Ok(Self {
            labels: labels.to_vec(),
            per_class: class.per_class,
            overall_accuracy: class.overall_accuracy,
            kappa,
            pearson_r,
            spearman_rho,
            n: m.total(),
            confusion: m,
            notes,
        })
    }

    /// Plain-text per-category table followed by the agreement measures.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.2}"));
        let width = self
            .per_class
            .iter()
            .map(|c| c.label.chars().count())
            .chain(["Overall Accuracy".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            "Persona Category", "Precision", "Recall", "F1-Score", "Accuracy"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9.2}",
                c.label,
                fmt(c.precision),
                fmt(c.recall),
                fmt(c.f1),
                c.accuracy
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9.2}",
            "Overall Accuracy", "--", "--", "--", self.overall_accuracy
        );
        let fmt3 = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(out);
        let _ = writeln!(out, "Cohen's kappa   {}", fmt3(self.kappa));
        let _ = writeln!(out, "Pearson's R     {}", fmt3(self.pearson_r));
        let _ = writeln!(out, "Spearman's rho  {}", fmt3(self.spearman_rho));
        let _ = writeln!(out, "Valid cases     {}", self.n);
        out
    }
}
