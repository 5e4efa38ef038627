//! Noise mask generators for denoising pretraining.
//!
//! A mask is a binary w x m matrix; zeros mark the corrupted input cells,
//! which are also exactly the cells scored by the reconstruction loss.
//! The stateful variants alternate masked/unmasked segments through a
//! two-state Markov chain so masked run lengths follow a geometric
//! distribution with mean `l_m`; the Bernoulli variants mask each step
//! independently. `sync` variants share one time pattern across all
//! variables, `sep` variants draw each variable independently.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    SepStateful,
    SepBernoulli,
    SyncStateful,
    SyncBernoulli,
    Forecast,
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskVariant::SepStateful => "sep_stateful",
            MaskVariant::SepBernoulli => "sep_bernoulli",
            MaskVariant::SyncStateful => "sync_stateful",
            MaskVariant::SyncBernoulli => "sync_bernoulli",
            MaskVariant::Forecast => "forecast",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sep_stateful" => Ok(MaskVariant::SepStateful),
            "sep_bernoulli" => Ok(MaskVariant::SepBernoulli),
            "sync_stateful" => Ok(MaskVariant::SyncStateful),
            "sync_bernoulli" => Ok(MaskVariant::SyncBernoulli),
            "forecast" => Ok(MaskVariant::Forecast),
            other => Err(Error::InvalidArgument(format!("unknown mask variant '{other}'"))),
        }
    }
}

/// Mask generation parameters: ratio `r`, mean masked run length `l_m`,
/// and for the forecast variant the concealed suffix fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub variant: MaskVariant,
    #[serde(default = "default_ratio")]
    pub r: f64,
    #[serde(default = "default_mean_run")]
    pub l_m: f64,
    /// Suffix fraction for the forecast variant.
    #[serde(default = "default_fraction")]
    pub forecast_fraction: f64,
    /// Base seed for mask streams (training code derives per-sample,
    /// per-epoch streams from it).
    #[serde(default)]
    pub seed: u64,
}

fn default_ratio() -> f64 {
    0.15
}
fn default_mean_run() -> f64 {
    3.0
}
fn default_fraction() -> f64 {
    0.2
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            variant: MaskVariant::SepStateful,
            r: default_ratio(),
            l_m: default_mean_run(),
            forecast_fraction: default_fraction(),
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "masking ratio r must be in (0,1), got {}",
                self.r
            )));
        }
        if self.l_m < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "mean masked run length l_m must be >= 1, got {}",
                self.l_m
            )));
        }
        if self.variant == MaskVariant::Forecast
            && !(self.forecast_fraction > 0.0 && self.forecast_fraction < 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "forecast fraction must be in (0,1), got {}",
                self.forecast_fraction
            )));
        }
        Ok(())
    }

    /// Mean unmasked run length implied by (r, l_m).
    pub fn mean_unmasked_run(&self) -> f64 {
        (1.0 - self.r) / self.r * self.l_m
    }
}

/// Binary noise mask: 1 keeps the input value, 0 corrupts it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseMask {
    w: usize,
    m: usize,
    /// Row-major w x m bits.
    bits: Vec<u8>,
}

impl NoiseMask {
    pub fn new(w: usize, m: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), w * m);
        debug_assert!(bits.iter().all(|&b| b <= 1));
        NoiseMask { w, m, bits }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w, self.m)
    }

    pub fn bit(&self, t: usize, i: usize) -> u8 {
        self.bits[t * self.m + i]
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_masked(&self, t: usize, i: usize) -> bool {
        self.bit(t, i) == 0
    }

    /// Index set of corrupted cells, reconstructed from the bits.
    pub fn masked_index_set(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.w {
            for i in 0..self.m {
                if self.is_masked(t, i) {
                    out.push((t, i));
                }
            }
        }
        out
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.bits.len() as f64
    }
}

/// Generate a mask according to `spec`. The rng should be a stream derived
/// from (seed, epoch, sample index) so samples and epochs are independent.
pub fn generate(w: usize, m: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<NoiseMask> {
    spec.validate()?;
    if w == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!("mask dims must be positive, got {w}x{m}")));
    }
    let mask = match spec.variant {
        MaskVariant::SepStateful => {
            let mut bits = vec![1u8; w * m];
            for col in 0..m {
                let column = stateful_column(w, spec, rng);
                for (t, &b) in column.iter().enumerate() {
                    bits[t * m + col] = b;
                }
            }
            NoiseMask::new(w, m, bits)
        }
        MaskVariant::SepBernoulli => {
            let mut bits = vec![1u8; w * m];
            for col in 0..m {
                for t in 0..w {
                    if rng.gen::<f64>() < spec.r {
                        bits[t * m + col] = 0;
                    }
                }
            }
            NoiseMask::new(w, m, bits)
        }
        MaskVariant::SyncStateful => replicate_rows(w, m, &stateful_column(w, spec, rng)),
        MaskVariant::SyncBernoulli => {
            let row: Vec<u8> = (0..w)
                .map(|_| if rng.gen::<f64>() < spec.r { 0 } else { 1 })
                .collect();
            replicate_rows(w, m, &row)
        }
        MaskVariant::Forecast => return forecast(w, m, spec.forecast_fraction),
    };
    Ok(mask)
}

/// Deterministic forecasting mask: the last ceil(fraction * w) time steps are
/// concealed in every variable simultaneously.
pub fn forecast(w: usize, m: usize, fraction: f64) -> Result<NoiseMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "forecast fraction must be in (0,1), got {fraction}"
        )));
    }
    let masked_rows = ((fraction * w as f64).ceil() as usize).min(w);
    let mut bits = vec![1u8; w * m];
    for t in (w - masked_rows)..w {
        for i in 0..m {
            bits[t * m + i] = 0;
        }
    }
    Ok(NoiseMask::new(w, m, bits))
}

/// Two-state Markov chain over one column. Transition probabilities
/// p_m = 1/l_m (masked -> unmasked) and p_u = p_m * r/(1-r) (unmasked ->
/// masked) give geometric masked runs of mean l_m and masked fraction r.
/// The initial state is drawn from the stationary distribution.
fn stateful_column(w: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let p_m = 1.0 / spec.l_m;
    let p_u = p_m * spec.r / (1.0 - spec.r);
    let mut masked = rng.gen::<f64>() < spec.r;
    let mut out = Vec::with_capacity(w);
    for _ in 0..w {
        out.push(if masked { 0 } else { 1 });
        let flip = if masked { p_m } else { p_u };
        if rng.gen::<f64>() < flip {
            masked = !masked;
        }
    }
    out
}

fn replicate_rows(w: usize, m: usize, row: &[u8]) -> NoiseMask {
    let mut bits = vec![1u8; w * m];
    for (t, &b) in row.iter().enumerate() {
        for i in 0..m {
            bits[t * m + i] = b;
        }
    }
    NoiseMask::new(w, m, bits)
}

/// Elementwise corruption: masked cells become exactly 0.
pub fn apply_mask(x: &Tensor, mask: &NoiseMask) -> Result<Tensor> {
    let (w, m) = mask.dims();
    if x.shape() != [w, m] {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: x.shape().to_vec(),
            right: vec![w, m],
        });
    }
    let data = x
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b == 0 { 0.0 } else { v })
        .collect();
    Ok(Tensor::new(vec![w, m], data))
}

/// Write a mask as a flat 0/1 text matrix (one row per time step, space
/// separated), for cross-implementation fixtures.
pub fn write_fixture(mask: &NoiseMask, path: &Path) -> Result<()> {
    let (w, m) = mask.dims();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in 0..w {
        let row: Vec<String> = (0..m).map(|i| mask.bit(t, i).to_string()).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_fixture(path: &Path) -> Result<NoiseMask> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<u8>, _> =
            line.split_whitespace().map(|tok| tok.parse::<u8>()).collect();
        let row = row.map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() })?;
        if row.iter().any(|&b| b > 1) {
            return Err(Error::Parse { line: ln + 1, msg: "mask bits must be 0 or 1".into() });
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse { line: ln + 1, msg: "inconsistent row width".into() });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, msg: "empty mask fixture".into() });
    }
    let (w, m) = (rows.len(), rows[0].len());
    Ok(NoiseMask::new(w, m, rows.concat()))
}
