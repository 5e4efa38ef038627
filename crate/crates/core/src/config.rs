//! Run configuration: a TOML file with `[model]`, `[train]`, and `[mask]`
//! sections. Unknown keys are rejected. A named preset supplies encoder
//! geometry defaults; explicitly set keys win over the preset. The fully
//! resolved configuration is written next to run outputs so a run can be
//! reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::NormMode;
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskVariant};
use crate::model::{Head, InputProjection, ModelConfig, NormKind, PosEncoding};
use crate::presets::{self, Family, COMMON_DROPOUT, COMMON_LR};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training split archive path.
    pub dataset: Option<PathBuf>,
    /// Test split archive path (defaults to `dataset` with TRAIN→TEST).
    pub test_dataset: Option<PathBuf>,
    pub preset: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// "variance" or "stddev" (default).
    pub normalization: Option<String>,
    /// Maximum sequence length; defaults to the longest training sample.
    pub max_len: Option<usize>,
    /// Fraction of training samples that keep their labels.
    pub label_fraction: Option<f64>,
    /// Train/validation split ratio (default 0.8).
    pub val_split: Option<f64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub mask: MaskSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_blocks: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
    /// "batch" (default) or "layer".
    pub norm: Option<String>,
    /// "learnable" (default) or "sinusoidal".
    pub pos_encoding: Option<String>,
    /// "linear" (default) or "conv".
    pub projection: Option<String>,
    pub conv_kernel: Option<usize>,
    pub conv_stride: Option<usize>,
    pub conv_dilation: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub freeze: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    /// sep_stateful (default) | sep_bernoulli | sync_stateful |
    /// sync_bernoulli | forecast
    pub variant: Option<String>,
    pub r: Option<f64>,
    pub l_m: Option<f64>,
    pub forecast_fraction: Option<f64>,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn norm_mode(&self) -> Result<NormMode> {
        match self.normalization.as_deref() {
            None => Ok(NormMode::Stddev),
            Some(s) => s.parse(),
        }
    }

    pub fn val_split(&self) -> f64 {
        self.val_split.unwrap_or(0.8)
    }

    /// Build the model configuration for a dataset with `m` variables, a
    /// sequence cap of `w`, and the given head. `family` selects between
    /// the supervised and unsupervised preset tables.
    pub fn resolve_model(&self, m: usize, w: usize, head: Head, family: Family) -> Result<ModelConfig> {
        let preset = match &self.preset {
            Some(name) => presets::lookup_strict(name, family)?,
            None => presets::GOOD_DEFAULT,
        };
        let s = &self.model;
        let norm_kind = match s.norm.as_deref() {
            None | Some("batch") => NormKind::Batch,
            Some("layer") => NormKind::Layer,
            Some(other) => return Err(Error::Config(format!("unknown norm kind '{other}'"))),
        };
        let pos_encoding = match s.pos_encoding.as_deref() {
            None | Some("learnable") => PosEncoding::Learnable,
            Some("sinusoidal") => PosEncoding::Sinusoidal,
            Some(other) => return Err(Error::Config(format!("unknown pos encoding '{other}'"))),
        };
        let input_projection = match s.projection.as_deref() {
            None | Some("linear") => InputProjection::Linear,
            Some("conv") => InputProjection::Conv1d {
                kernel: s.conv_kernel.unwrap_or(3),
                stride: s.conv_stride.unwrap_or(1),
                dilation: s.conv_dilation.unwrap_or(1),
            },
            Some(other) => return Err(Error::Config(format!("unknown projection '{other}'"))),
        };
        let cfg = ModelConfig {
            m,
            w: self.max_len.unwrap_or(w),
            d_model: s.d_model.unwrap_or(preset.d_model),
            n_heads: s.n_heads.unwrap_or(preset.n_heads),
            n_blocks: s.n_blocks.unwrap_or(preset.n_blocks),
            d_ff: s.d_ff.unwrap_or(preset.d_ff),
            dropout_p: s.dropout.unwrap_or(COMMON_DROPOUT),
            activation: "gelu".into(),
            norm_kind,
            pos_encoding,
            input_projection,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_train(&self, family: Family) -> Result<TrainConfig> {
        let preset = match &self.preset {
            Some(name) => presets::lookup_strict(name, family)?,
            None => presets::GOOD_DEFAULT,
        };
        let s = &self.train;
        let cfg = TrainConfig {
            lr: s.lr.unwrap_or(COMMON_LR),
            batch_size: s.batch_size.unwrap_or(preset.batch_size),
            epochs: s.epochs.unwrap_or(100),
            seed: self.seed(),
            freeze_all_but_head: s.freeze.unwrap_or(false),
            patience: s.patience,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_mask(&self) -> Result<MaskSpec> {
        let s = &self.mask;
        let variant = match s.variant.as_deref() {
            None | Some("sep_stateful") => MaskVariant::SepStateful,
            Some("sep_bernoulli") => MaskVariant::SepBernoulli,
            Some("sync_stateful") => MaskVariant::SyncStateful,
            Some("sync_bernoulli") => MaskVariant::SyncBernoulli,
            Some("forecast") => MaskVariant::Forecast,
            Some(other) => return Err(Error::Config(format!("unknown mask variant '{other}'"))),
        };
        let mut spec = MaskSpec { variant, seed: self.seed(), ..MaskSpec::default() };
        if let Some(r) = s.r {
            spec.r = r;
        }
        if let Some(l_m) = s.l_m {
            spec.l_m = l_m;
        }
        if let Some(f) = s.forecast_fraction {
            spec.forecast_fraction = f;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Fully resolved copy with every effective value made explicit, for
    /// writing next to run outputs.
    pub fn effective(
        &self,
        model: &ModelConfig,
        train: &TrainConfig,
        mask: Option<&MaskSpec>,
    ) -> RunConfig {
        let mut out = self.clone();
        out.seed = Some(self.seed());
        out.normalization = Some(
            self.norm_mode().map(|m| m.to_string()).unwrap_or_else(|_| "stddev".into()),
        );
        out.max_len = Some(model.w);
        out.val_split = Some(self.val_split());
        out.preset = None; // geometry is written out explicitly instead
        out.model = ModelSection {
            d_model: Some(model.d_model),
            n_heads: Some(model.n_heads),
            n_blocks: Some(model.n_blocks),
            d_ff: Some(model.d_ff),
            dropout: Some(model.dropout_p),
            norm: Some(
                match model.norm_kind {
                    NormKind::Batch => "batch",
                    NormKind::Layer => "layer",
                }
                .into(),
            ),
            pos_encoding: Some(
                match model.pos_encoding {
                    PosEncoding::Learnable => "learnable",
                    PosEncoding::Sinusoidal => "sinusoidal",
                }
                .into(),
            ),
            projection: Some(
                match model.input_projection {
                    InputProjection::Linear => "linear",
                    InputProjection::Conv1d { .. } => "conv",
                }
                .into(),
            ),
            conv_kernel: match model.input_projection {
                InputProjection::Conv1d { kernel, .. } => Some(kernel),
                _ => None,
            },
            conv_stride: match model.input_projection {
                InputProjection::Conv1d { stride, .. } => Some(stride),
                _ => None,
            },
            conv_dilation: match model.input_projection {
                InputProjection::Conv1d { dilation, .. } => Some(dilation),
                _ => None,
            },
        };
        out.train = TrainSection {
            lr: Some(train.lr),
            batch_size: Some(train.batch_size),
            epochs: Some(train.epochs),
            patience: train.patience,
            freeze: Some(train.freeze_all_but_head),
        };
        if let Some(spec) = mask {
            out.mask = MaskSection {
                variant: Some(
                    match spec.variant {
                        MaskVariant::SepStateful => "sep_stateful",
                        MaskVariant::SepBernoulli => "sep_bernoulli",
                        MaskVariant::SyncStateful => "sync_stateful",
                        MaskVariant::SyncBernoulli => "sync_bernoulli",
                        MaskVariant::Forecast => "forecast",
                    }
                    .into(),
                ),
                r: Some(spec.r),
                l_m: Some(spec.l_m),
                forecast_fraction: Some(spec.forecast_fraction),
            };
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
