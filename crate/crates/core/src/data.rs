//! Dataset ingestion and batching.
//!
//! Parses the UEA/UCR archive sequence text format ('@' header directives,
//! one sample per line, dimensions separated by ':', values comma separated,
//! trailing label field when the header declares one), computes training-set
//! normalization statistics, pads variable-length samples into batches, and
//! provides deterministic stratified splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive;
use crate::tensor::Tensor;

pub const VAR_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Value(Vec<f64>),
}

/// One multivariate series, time-major [len x m].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sample {
    pub id: String,
    pub values: Vec<f64>,
    pub len: usize,
    pub m: usize,
    pub label: Option<Label>,
    /// Positions (t, i) that were missing in the raw data and were filled
    /// by interpolation.
    pub missing: Vec<(usize, usize)>,
}

impl Sample {
    pub fn at(&self, t: usize, i: usize) -> f64 {
        self.values[t * self.m + i]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len, self.m], self.values.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub m: usize,
    pub samples: Vec<Sample>,
    /// Class label strings in declaration order, when classification.
    pub class_labels: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.len).max().unwrap_or(0)
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.class_labels.as_ref().map(|c| c.len())
    }

    /// Regression target width, when targets are present.
    pub fn target_dim(&self) -> Option<usize> {
        self.samples.iter().find_map(|s| match &s.label {
            Some(Label::Value(v)) => Some(v.len()),
            _ => None,
        })
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name\t{}", self.name);
        let _ = writeln!(out, "samples\t{}", self.len());
        let _ = writeln!(out, "dimensions\t{}", self.m);
        let _ = writeln!(out, "max_length\t{}", self.max_len());
        if let Some(labels) = &self.class_labels {
            let _ = writeln!(out, "classes\t{}", labels.len());
            let _ = writeln!(out, "class_labels\t{}", labels.join(","));
        }
        out
    }
}

/// Missing-value policy for raw archives that contain '?' entries:
/// linear interpolation within a dimension, edge-hold at the boundaries.
/// A dimension that is entirely missing in a sample is an error.
fn impute_column(col: &mut [f64], line: usize) -> Result<Vec<usize>> {
    let n = col.len();
    let known: Vec<usize> = (0..n).filter(|&t| col[t].is_finite()).collect();
    if known.is_empty() {
        return Err(Error::Parse {
            line,
            msg: "dimension consists entirely of missing values".into(),
        });
    }
    let mut filled = Vec::new();
    for t in 0..n {
        if col[t].is_finite() {
            continue;
        }
        filled.push(t);
        let prev = known.iter().rev().find(|&&k| k < t).copied();
        let next = known.iter().find(|&&k| k > t).copied();
        col[t] = match (prev, next) {
            (Some(p), Some(q)) => {
                let frac = (t - p) as f64 / (q - p) as f64;
                col[p] + frac * (col[q] - col[p])
            }
            (Some(p), None) => col[p],
            (None, Some(q)) => col[q],
            (None, None) => unreachable!(),
        };
    }
    Ok(filled)
}

/// Parse an archive-format file (.ts).
pub fn parse_archive(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let name_hint = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_archive_str(&text, &name_hint)
}

pub fn parse_archive_str(text: &str, name_hint: &str) -> Result<Dataset> {
    let mut name = name_hint.to_string();
    let mut class_labels: Option<Vec<String>> = None;
    let mut has_target = false;
    let mut declared_dims: Option<usize> = None;
    let mut in_data = false;
    let mut samples: Vec<Sample> = Vec::new();
    let mut m: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if let Some(rest) = line.strip_prefix('@') {
                let mut parts = rest.split_whitespace();
                let key = parts.next().unwrap_or("").to_ascii_lowercase();
                match key.as_str() {
                    "problemname" => {
                        if let Some(v) = parts.next() {
                            name = v.to_string();
                        }
                    }
                    "dimensions" => {
                        declared_dims = parts.next().and_then(|v| v.parse().ok());
                    }
                    "classlabel" => {
                        let flag = parts.next().unwrap_or("false");
                        if flag.eq_ignore_ascii_case("true") {
                            class_labels = Some(parts.map(|s| s.to_string()).collect());
                        }
                    }
                    "targetlabel" => {
                        let flag = parts.next().unwrap_or("false");
                        has_target = flag.eq_ignore_ascii_case("true");
                    }
                    "data" => in_data = true,
                    // seriesLength, equalLength, univariate, timeStamps,
                    // missing: informational, not needed for parsing.
                    _ => {}
                }
                continue;
            }
            return Err(Error::Parse {
                line: ln,
                msg: "expected '@' header directive before data".into(),
            });
        }

        let has_label = class_labels.is_some() || has_target;
        let mut fields: Vec<&str> = line.split(':').collect();
        let label_field = if has_label {
            Some(fields.pop().ok_or(Error::Parse { line: ln, msg: "missing label field".into() })?)
        } else {
            None
        };
        if fields.is_empty() {
            return Err(Error::Parse { line: ln, msg: "no dimensions on data line".into() });
        }
        let dims = fields.len();
        if let Some(expected) = m {
            if dims != expected {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("sample has {dims} dimensions, expected {expected}"),
                });
            }
        } else {
            if let Some(decl) = declared_dims {
                if dims != decl {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("sample has {dims} dimensions, header declares {decl}"),
                    });
                }
            }
            m = Some(dims);
        }

        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dims);
        for (d, field) in fields.iter().enumerate() {
            let mut col = Vec::new();
            for (ti, tok) in field.split(',').enumerate() {
                let tok = tok.trim();
                let v = if tok == "?" || tok.eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: ln,
                        msg: format!("unparseable number '{tok}' (dimension {d}, position {ti})"),
                    })?
                };
                col.push(v);
            }
            columns.push(col);
        }
        let len = columns[0].len();
        if len == 0 {
            return Err(Error::Parse { line: ln, msg: "empty series".into() });
        }
        if let Some(bad) = columns.iter().position(|c| c.len() != len) {
            return Err(Error::Parse {
                line: ln,
                msg: format!("dimension {bad} has {} values, dimension 0 has {len}", columns[bad].len()),
            });
        }
        let mut missing = Vec::new();
        for (d, col) in columns.iter_mut().enumerate() {
            if col.iter().any(|v| v.is_nan()) {
                for t in impute_column(col, ln)? {
                    missing.push((t, d));
                }
            }
        }
        missing.sort_unstable();

        let label = match label_field {
            None => None,
            Some(tok) => {
                let tok = tok.trim();
                if let Some(classes) = &class_labels {
                    let cls = classes.iter().position(|c| c == tok).ok_or_else(|| Error::Parse {
                        line: ln,
                        msg: format!("label '{tok}' not in declared class set {classes:?}"),
                    })?;
                    Some(Label::Class(cls))
                } else {
                    let vals: std::result::Result<Vec<f64>, _> =
                        tok.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    Some(Label::Value(vals.map_err(|_| Error::Parse {
                        line: ln,
                        msg: format!("unparseable target '{tok}'"),
                    })?))
                }
            }
        };

        // interleave to time-major [len x m]
        let mut values = vec![0.0; len * dims];
        for (d, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t * dims + d] = v;
            }
        }
        samples.push(Sample {
            id: format!("{}", samples.len()),
            values,
            len,
            m: dims,
            label,
            missing,
        });
    }

    let m = m.ok_or(Error::Parse { line: 0, msg: "no data lines".into() })?;
    Ok(Dataset { name, m, samples, class_labels })
}

/// Write a dataset back to archive text format.
pub fn write_archive(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "@problemName {}", ds.name)?;
    writeln!(out, "@dimensions {}", ds.m)?;
    writeln!(out, "@equalLength false")?;
    match &ds.class_labels {
        Some(labels) => writeln!(out, "@classLabel true {}", labels.join(" "))?,
        None => {
            if ds.target_dim().is_some() {
                writeln!(out, "@targetlabel true")?;
            } else {
                writeln!(out, "@classLabel false")?;
            }
        }
    }
    writeln!(out, "@data")?;
    for s in &ds.samples {
        let mut fields: Vec<String> = Vec::with_capacity(ds.m + 1);
        for d in 0..ds.m {
            let col: Vec<String> = (0..s.len).map(|t| format!("{}", s.at(t, d))).collect();
            fields.push(col.join(","));
        }
        match &s.label {
            Some(Label::Class(c)) => {
                let labels = ds.class_labels.as_ref().expect("class label without class set");
                fields.push(labels[*c].clone());
            }
            Some(Label::Value(v)) => {
                fields.push(v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(","));
            }
            None => {}
        }
        writeln!(out, "{}", fields.join(":"))?;
    }
    Ok(())
}

/// CSV-long fallback: header `id,time,var,value[,label]`, one value per row.
/// Rows for a sample must agree on the label; `var` is a 0-based index.
pub fn parse_csv_long(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse { line: 0, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_label = match cols.as_slice() {
        ["id", "time", "var", "value"] => false,
        ["id", "time", "var", "value", "label"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header id,time,var,value[,label]".into(),
            })
        }
    };
    struct Acc {
        cells: BTreeMap<(usize, usize), f64>,
        label: Option<String>,
    }
    let mut per_sample: BTreeMap<String, Acc> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (idx, raw) in lines {
        let ln = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(Error::Parse { line: ln, msg: "wrong field count".into() });
        }
        let id = f[0].to_string();
        let t: usize = f[1].parse().map_err(|_| Error::Parse { line: ln, msg: "bad time".into() })?;
        let v: usize = f[2].parse().map_err(|_| Error::Parse { line: ln, msg: "bad var".into() })?;
        let value: f64 =
            f[3].parse().map_err(|_| Error::Parse { line: ln, msg: "bad value".into() })?;
        let entry = per_sample.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc { cells: BTreeMap::new(), label: None }
        });
        entry.cells.insert((t, v), value);
        if has_label {
            let lab = f[4].to_string();
            if let Some(prev) = &entry.label {
                if *prev != lab {
                    return Err(Error::Parse { line: ln, msg: "conflicting labels for sample".into() });
                }
            }
            entry.label = Some(lab);
        }
    }
    if order.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no data rows".into() });
    }
    let m = per_sample
        .values()
        .flat_map(|a| a.cells.keys().map(|&(_, v)| v + 1))
        .max()
        .unwrap_or(0);
    // Labels: numeric -> regression target; otherwise classes.
    let all_numeric = per_sample
        .values()
        .filter_map(|a| a.label.as_ref())
        .all(|l| l.parse::<f64>().is_ok());
    let mut class_labels: Option<Vec<String>> = None;
    if has_label && !all_numeric {
        let mut set: Vec<String> =
            per_sample.values().filter_map(|a| a.label.clone()).collect();
        set.sort();
        set.dedup();
        class_labels = Some(set);
    }
    let mut samples = Vec::new();
    for id in order {
        let acc = &per_sample[&id];
        let len = acc.cells.keys().map(|&(t, _)| t + 1).max().unwrap_or(0);
        let mut values = vec![f64::NAN; len * m];
        for (&(t, v), &x) in &acc.cells {
            values[t * m + v] = x;
        }
        for d in 0..m {
            let mut col: Vec<f64> = (0..len).map(|t| values[t * m + d]).collect();
            if col.iter().any(|v| v.is_nan()) {
                let _ = impute_column(&mut col, 0)?;
            }
            for (t, &v) in col.iter().enumerate() {
                values[t * m + d] = v;
            }
        }
        let label = match (&acc.label, &class_labels) {
            (None, _) => None,
            (Some(l), Some(set)) => Some(Label::Class(set.iter().position(|c| c == l).unwrap())),
            (Some(l), None) => Some(Label::Value(vec![l.parse().unwrap()])),
        };
        samples.push(Sample { id, values, len, m, label, missing: Vec::new() });
    }
    Ok(Dataset { name: "csv".into(), m, samples, class_labels })
}

/// Per-dimension mean and variance pooled over all time steps of all
/// training samples. Variance clamped from below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Literal reading: divide by the variance.
    Variance,
    /// Conventional reading: divide by the standard deviation.
    Stddev,
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Variance => "variance",
            NormMode::Stddev => "stddev",
        })
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(NormMode::Variance),
            "stddev" => Ok(NormMode::Stddev),
            other => Err(Error::InvalidArgument(format!("unknown normalization mode '{other}'"))),
        }
    }
}

pub fn compute_norm_stats(train: &Dataset) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot compute stats of empty dataset".into()));
    }
    let m = train.m;
    let mut mean = vec![0.0; m];
    let mut count = 0usize;
    for s in &train.samples {
        for t in 0..s.len {
            for d in 0..m {
                mean[d] += s.at(t, d);
            }
        }
        count += s.len;
    }
    for v in mean.iter_mut() {
        *v /= count as f64;
    }
    let mut var = vec![0.0; m];
    for s in &train.samples {
        for t in 0..s.len {
            for d in 0..m {
                let dx = s.at(t, d) - mean[d];
                var[d] += dx * dx;
            }
        }
    }
    for v in var.iter_mut() {
        *v = (*v / count as f64).max(VAR_CLAMP);
    }
    Ok(NormStats { mean, var })
}

pub fn normalize_sample(sample: &Sample, stats: &NormStats, mode: NormMode) -> Sample {
    let m = sample.m;
    let denom: Vec<f64> = match mode {
        NormMode::Variance => stats.var.clone(),
        NormMode::Stddev => stats.var.iter().map(|v| v.sqrt()).collect(),
    };
    let values = sample
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - stats.mean[i % m]) / denom[i % m])
        .collect();
    Sample { values, ..sample.clone() }
}

pub fn normalize_dataset(ds: &Dataset, stats: &NormStats, mode: NormMode) -> Dataset {
    Dataset {
        samples: ds.samples.iter().map(|s| normalize_sample(s, stats, mode)).collect(),
        ..ds.clone()
    }
}

/// Padded minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, w, m] with `pad_fill` beyond each sample's length.
    pub x: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<Label>>,
    pub sample_indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}

/// Assemble samples into a padded batch. Samples longer than `w` are
/// truncated with a warning on stderr.
pub fn pad_and_batch(samples: &[&Sample], indices: &[usize], w: usize, pad_fill: f64) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let m = samples[0].m;
    let bsz = samples.len();
    let mut data = vec![pad_fill; bsz * w * m];
    let mut lengths = Vec::with_capacity(bsz);
    let mut labels = Vec::with_capacity(bsz);
    for (b, s) in samples.iter().enumerate() {
        if s.m != m {
            return Err(Error::ShapeMismatch { op: "pad_and_batch", left: vec![s.m], right: vec![m] });
        }
        let len = if s.len > w {
            eprintln!("warning: sample {} length {} truncated to {}", s.id, s.len, w);
            w
        } else {
            s.len
        };
        for t in 0..len {
            for d in 0..m {
                data[(b * w + t) * m + d] = s.at(t, d);
            }
        }
        lengths.push(len);
        labels.push(s.label.clone());
    }
    Ok(Batch {
        x: Tensor::new(vec![bsz, w, m], data),
        lengths,
        labels,
        sample_indices: indices.to_vec(),
    })
}

/// Deterministic split, stratified by class when labels are classes.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let mut rng = derive(seed, &[0x51]);
    let groups = stratify(ds);
    let mut left_idx: Vec<usize> = Vec::new();
    let mut right_idx: Vec<usize> = Vec::new();
    for mut group in groups {
        group.shuffle(&mut rng);
        // Round so small groups keep at least one sample on each side when possible.
        let n_left = ((group.len() as f64 * ratio).round() as usize).clamp(
            usize::from(group.len() > 1),
            group.len() - usize::from(group.len() > 1),
        );
        left_idx.extend(&group[..n_left]);
        right_idx.extend(&group[n_left..]);
    }
    left_idx.sort_unstable();
    right_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
        ..ds.clone()
    };
    Ok((pick(&left_idx), pick(&right_idx)))
}

/// Retain labels for a stratified random fraction of samples; the rest stay
/// in the dataset unlabeled (usable for pretraining only).
pub fn subset_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction must be in (0,1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let mut rng = derive(seed, &[0x5b]);
    let mut keep = vec![false; ds.len()];
    for mut group in stratify(ds) {
        group.shuffle(&mut rng);
        let n_keep = (group.len() as f64 * fraction).round() as usize;
        for &i in &group[..n_keep] {
            keep[i] = true;
        }
    }
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if keep[i] {
                s.clone()
            } else {
                Sample { label: None, ..s.clone() }
            }
        })
        .collect();
    Ok(Dataset { samples, ..ds.clone() })
}

/// Group sample indices by class (one group for unlabeled / regression).
fn stratify(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let key = match &s.label {
            Some(Label::Class(c)) => *c as i64,
            _ => -1,
        };
        groups.entry(key).or_default().push(i);
    }
    groups.into_values().collect()
}
