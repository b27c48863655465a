//! Evaluation metrics: per-step entropic OT losses, class histogram
//! distances and nearest-neighbour label transfer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::ot::{entropic_ot, sinkhorn_divergence, DiscreteMeasure, SinkhornOptions};

/// One entry per predicted transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLossReport {
    /// `W_ε(ρ_t, μ_t)`, biased: equal clouds give the self cost.
    pub w_eps: Vec<f64>,
    /// `W̄_ε(ρ_t, μ_t)`.
    pub w_bar: Vec<f64>,
}

impl StepLossReport {
    pub fn len(&self) -> usize {
        self.w_eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_eps.is_empty()
    }

    pub fn mean_w_eps(&self) -> f64 {
        mean(&self.w_eps)
    }

    pub fn mean_w_bar(&self) -> f64 {
        mean(&self.w_bar)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compares `preds[i]` with `truths[i]` for every `i`; callers leave out
/// the shared initial snapshot.
pub fn prediction_loss_per_step(preds: &[PointCloud], truths: &[PointCloud], eps: f64, opts: &SinkhornOptions) -> Result<StepLossReport> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth snapshots",
            preds.len(),
            truths.len()
        )));
    }
    let mut w_eps = Vec::with_capacity(preds.len());
    let mut w_bar = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        t.check_dim(p.dim())?;
        let mu = DiscreteMeasure::uniform(p.clone())?;
        let nu = DiscreteMeasure::uniform(t.clone())?;
        let r = entropic_ot(&mu, &nu, eps, opts)?;
        if !r.converged {
            log::warn!("W_ε evaluated with an unconverged Sinkhorn run (marginal error {:.2e})", r.marginal_error);
        }
        w_eps.push(r.cost);
        w_bar.push(sinkhorn_divergence(&mu, &nu, eps, opts)?);
    }
    Ok(StepLossReport { w_eps, w_bar })
}

/// Per-step `(mean, sample std)` across runs.
pub fn aggregate(values: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = values.first() else {
        return Ok(Vec::new());
    };
    if values.iter().any(|v| v.len() != first.len()) {
        return Err(Error::invalid("runs report different numbers of steps"));
    }
    let n = values.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let m = values.iter().map(|v| v[i]).sum::<f64>() / n;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v[i] - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (m, var.sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ClassHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

pub fn class_histogram(labels: &[u32], k_classes: usize) -> Result<ClassHistogram> {
    let mut counts = vec![0u64; k_classes];
    for &l in labels {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("label {l} outside [0, {k_classes})")))?;
        *slot += 1;
    }
    Ok(ClassHistogram::from_counts(counts))
}

fn same_classes(a: &ClassHistogram, b: &ClassHistogram) -> Result<()> {
    if a.classes() != b.classes() {
        return Err(Error::DimensionMismatch {
            expected: a.classes(),
            got: b.classes(),
        });
    }
    Ok(())
}

/// Squared Hellinger distance between the normalized histograms.
pub fn hellinger(a: &ClassHistogram, b: &ClassHistogram) -> Result<f64> {
    same_classes(a, b)?;
    if a.total == 0 || b.total == 0 {
        return Err(Error::invalid("hellinger distance of an empty histogram"));
    }
    let (ta, tb) = (a.total as f64, b.total as f64);
    let s: f64 = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| ((x as f64 / ta).sqrt() - (y as f64 / tb).sqrt()).powi(2))
        .sum();
    Ok(0.5 * s)
}

/// `Σ|a_i − b_i|` on raw counts.
pub fn l1_histogram(a: &ClassHistogram, b: &ClassHistogram) -> Result<f64> {
    same_classes(a, b)?;
    Ok(a.counts.iter().zip(&b.counts).map(|(&x, &y)| x.abs_diff(y) as f64).sum())
}

/// Euclidean k-nearest-neighbour majority vote. Equal distances go to the
/// lower training index, tied votes to the smaller class id.
pub fn knn_classify(train: &PointCloud, labels: &[u32], queries: &PointCloud, k: usize) -> Result<Vec<u32>> {
    if train.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if labels.len() != train.len() {
        return Err(Error::invalid(format!("{} labels for {} training points", labels.len(), train.len())));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!("k = {k} with {} training points", train.len())));
    }
    queries.check_dim(train.dim())?;
    let n_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut votes = vec![0usize; n_classes];
    Ok(queries
        .points()
        .map(|q| {
            order.clear();
            order.extend(train.points().enumerate().map(|(i, p)| {
                let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            }));
            order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, i) in &order[..k] {
                votes[labels[i] as usize] += 1;
            }
            // max_by_key keeps the last maximum, so scan in reverse.
            votes
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|(_, &v)| v)
                .map(|(c, _)| c as u32)
                .expect("at least one class")
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub mode: String,
    pub step: usize,
    pub value: f64,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(metric: &str, mode: &str, step: usize, value: f64, seed: u64) -> Self {
        Self {
            metric: metric.into(),
            mode: mode.into(),
            step,
            value,
            seed,
        }
    }
}

/// Rows for both losses of a report, steps numbered from 1.
pub fn report_records(report: &StepLossReport, mode: &str, seed: u64) -> Vec<MetricRecord> {
    let mut out = Vec::with_capacity(2 * report.len());
    for (i, (&w, &wb)) in report.w_eps.iter().zip(&report.w_bar).enumerate() {
        out.push(MetricRecord::new("w_eps", mode, i + 1, w, seed));
        out.push(MetricRecord::new("sinkhorn_divergence", mode, i + 1, wb, seed));
    }
    out
}

pub fn write_records_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_records_json(records: &[MetricRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_records_json(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
