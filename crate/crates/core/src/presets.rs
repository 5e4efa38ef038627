//! Per-dataset hyperparameter presets plus a general-purpose default.
//!
//! Every preset shares the fixed settings (gelu activation, dropout 0.1,
//! learning rate 0.001, learnable positional encodings) and differs only in
//! encoder geometry. Unlisted datasets fall back to `good-default`
//! (d_model=128, d_ff=256, 16 heads, 3 blocks, batch size 128).

use crate::error::{Error, Result};

/// Encoder geometry plus training batch size for one preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub batch_size: usize,
}

pub const GOOD_DEFAULT: Preset = Preset {
    name: "good-default",
    n_blocks: 3,
    n_heads: 16,
    d_model: 128,
    d_ff: 256,
    batch_size: 128,
};

/// Fixed hyperparameters shared by every preset.
pub const COMMON_DROPOUT: f64 = 0.1;
pub const COMMON_LR: f64 = 0.001;

const fn preset(
    name: &'static str,
    n_blocks: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
) -> Preset {
    Preset { name, n_blocks, n_heads, d_model, d_ff, batch_size: 128 }
}

/// Best-performing supervised configurations, regression datasets.
pub const SUPERVISED_REGRESSION: &[Preset] = &[
    preset("AppliancesEnergy", 3, 8, 128, 512),
    preset("BenzeneConcentration", 3, 8, 128, 256),
    preset("BeijingPM10Quality", 3, 8, 64, 256),
    preset("BeijingPM25Quality", 3, 8, 64, 256),
    preset("LiveFuelMoistureContent", 3, 8, 64, 256),
    preset("IEEEPPG", 3, 8, 512, 512),
];

/// Best-performing unsupervised (pretraining) configurations, regression.
pub const UNSUPERVISED_REGRESSION: &[Preset] = &[
    preset("AppliancesEnergy", 3, 16, 128, 512),
    preset("BenzeneConcentration", 1, 8, 128, 256),
    preset("BeijingPM10Quality", 3, 8, 64, 256),
    preset("BeijingPM25Quality", 3, 8, 128, 256),
    preset("LiveFuelMoistureContent", 3, 8, 64, 256),
    preset("IEEEPPG", 4, 16, 512, 512),
];

/// Best-performing supervised configurations, classification datasets.
pub const SUPERVISED_CLASSIFICATION: &[Preset] = &[
    preset("EthanolConcentration", 1, 8, 64, 256),
    preset("FaceDetection", 3, 8, 128, 256),
    preset("Handwriting", 1, 8, 128, 256),
    preset("Heartbeat", 1, 8, 64, 256),
    preset("JapaneseVowels", 3, 8, 128, 256),
    preset("PEMS-SF", 1, 8, 128, 512),
    preset("SelfRegulationSCP1", 3, 8, 128, 256),
    preset("SelfRegulationSCP2", 3, 8, 128, 256),
    preset("SpokenArabicDigits", 3, 8, 64, 256),
    preset("UWaveGestureLibrary", 3, 16, 256, 256),
];

/// Best-performing unsupervised configurations, classification datasets.
pub const UNSUPERVISED_CLASSIFICATION: &[Preset] = &[
    preset("EthanolConcentration", 1, 8, 64, 256),
    preset("FaceDetection", 3, 8, 128, 256),
    preset("Handwriting", 3, 16, 64, 256),
    preset("Heartbeat", 1, 8, 64, 256),
    preset("JapaneseVowels", 3, 8, 128, 256),
    preset("PEMS-SF", 1, 8, 256, 512),
    preset("SelfRegulationSCP1", 3, 16, 256, 512),
    preset("SelfRegulationSCP2", 3, 8, 256, 512),
    preset("SpokenArabicDigits", 3, 8, 64, 256),
    preset("UWaveGestureLibrary", 3, 16, 256, 512),
];

/// Which preset family a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Supervised,
    Unsupervised,
}

/// Look up a dataset preset; unknown names fall back to `good-default`,
/// the literal name "good-default" always resolves.
pub fn lookup(name: &str, family: Family) -> Preset {
    let tables: [&[Preset]; 2] = match family {
        Family::Supervised => [SUPERVISED_CLASSIFICATION, SUPERVISED_REGRESSION],
        Family::Unsupervised => [UNSUPERVISED_CLASSIFICATION, UNSUPERVISED_REGRESSION],
    };
    for table in tables {
        if let Some(p) = table.iter().find(|p| p.name == name) {
            return *p;
        }
    }
    GOOD_DEFAULT
}

/// Strict lookup for explicitly requested presets: unknown names error.
pub fn lookup_strict(name: &str, family: Family) -> Result<Preset> {
    if name == GOOD_DEFAULT.name {
        return Ok(GOOD_DEFAULT);
    }
    let p = lookup(name, family);
    if p.name == GOOD_DEFAULT.name {
        return Err(Error::Config(format!("unknown preset '{name}'")));
    }
    Ok(p)
}
