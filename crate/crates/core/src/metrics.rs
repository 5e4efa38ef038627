//! Evaluation metrics and cross-model comparison statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rmse: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Score grid: one row per dataset, one column per model.
#[derive(Debug, Clone)]
pub struct ResultsMatrix {
    pub dataset_names: Vec<String>,
    pub model_names: Vec<String>,
    /// Row-major [datasets x models].
    pub scores: Vec<f64>,
}

impl ResultsMatrix {
    pub fn new(dataset_names: Vec<String>, model_names: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        let (n, m) = (dataset_names.len(), model_names.len());
        if n == 0 || m == 0 || scores.len() != n * m {
            return Err(Error::InvalidArgument(format!(
                "results matrix: {n} datasets x {m} models vs {} scores",
                scores.len()
            )));
        }
        Ok(ResultsMatrix { dataset_names, model_names, scores })
    }

    pub fn n_datasets(&self) -> usize {
        self.dataset_names.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        let m = self.n_models();
        &self.scores[i * m..(i + 1) * m]
    }
}

/// Average relative difference from the per-dataset mean:
/// r_j = (1/N) sum_i (R(i,j) - mean_i) / mean_i.
pub fn avg_rel_diff_from_mean(r: &ResultsMatrix) -> Vec<f64> {
    let (n, m) = (r.n_datasets(), r.n_models());
    let mut out = vec![0.0; m];
    for i in 0..n {
        let row = r.row(i);
        let mean = row.iter().sum::<f64>() / m as f64;
        for (j, &v) in row.iter().enumerate() {
            out[j] += (v - mean) / mean;
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    out
}

/// Per-dataset ranks averaged per model; ties share the mean of tied ranks.
pub fn avg_rank(r: &ResultsMatrix, lower_is_better: bool) -> Vec<f64> {
    let (n, m) = (r.n_datasets(), r.n_models());
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (j, rank) in row_ranks(r.row(i), lower_is_better).into_iter().enumerate() {
            out[j] += rank;
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    out
}

fn row_ranks(row: &[f64], lower_is_better: bool) -> Vec<f64> {
    let m = row.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let cmp = row[a].partial_cmp(&row[b]).expect("NaN score in results matrix");
        if lower_is_better {
            cmp
        } else {
            cmp.reverse()
        }
    });
    let mut ranks = vec![0.0; m];
    let mut k = 0;
    while k < m {
        let mut end = k + 1;
        while end < m && row[order[end]] == row[order[k]] {
            end += 1;
        }
        // Tied entries share the mean of the ranks they occupy.
        let shared = (k + 1..=end).sum::<usize>() as f64 / (end - k) as f64;
        for &idx in &order[k..end] {
            ranks[idx] = shared;
        }
        k = end;
    }
    ranks
}

/// Merge columns into one model by taking its best score per dataset, then
/// rank against the remaining models. Mirrors comparison tables that report
/// several variants of one method as a single entry.
pub fn avg_rank_merged(
    r: &ResultsMatrix,
    merge: &[usize],
    lower_is_better: bool,
) -> Result<(Vec<String>, Vec<f64>)> {
    if merge.is_empty() || merge.iter().any(|&j| j >= r.n_models()) {
        return Err(Error::InvalidArgument("invalid merge column set".into()));
    }
    let kept: Vec<usize> = (0..r.n_models()).filter(|j| !merge.contains(j)).collect();
    let mut names = vec![format!("merged({})", merge.len())];
    names.extend(kept.iter().map(|&j| r.model_names[j].clone()));
    let mut scores = Vec::new();
    for i in 0..r.n_datasets() {
        let row = r.row(i);
        let best = merge
            .iter()
            .map(|&j| row[j])
            .fold(if lower_is_better { f64::INFINITY } else { f64::NEG_INFINITY }, |acc, v| {
                if lower_is_better {
                    acc.min(v)
                } else {
                    acc.max(v)
                }
            });
        scores.push(best);
        scores.extend(kept.iter().map(|&j| row[j]));
    }
    let merged = ResultsMatrix::new(r.dataset_names.clone(), names.clone(), scores)?;
    Ok((names, avg_rank(&merged, lower_is_better)))
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_records(records: &[MetricRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(ln, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() })
        })
        .collect()
}

/// Render a delimited comparison table (models as columns).
pub fn comparison_table(model_names: &[String], rows: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::from("statistic");
    for name in model_names {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (label, values) in rows {
        out.push_str(label);
        for v in values {
            out.push('\t');
            out.push_str(&format!("{v:.4}"));
        }
        out.push('\n');
    }
    out
}
