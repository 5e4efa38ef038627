//! Command-line entry point: pretraining, supervised training, fine-tuning,
//! evaluation, imputation, mask fixture generation, and checkpoint diffing.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data or checkpoint
//! error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tst::checkpoint::{self, Checkpoint, NormInfo};
use tst::config::RunConfig;
use tst::data::{self, Dataset};
use tst::error::{Error, Result};
use tst::masking::{self, MaskSpec, MaskVariant, NoiseMask};
use tst::metrics;
use tst::model::{Head, TSTModel, Trainable};
use tst::presets::Family;
use tst::rng::derive;
use tst::tensor::{Mode, Tape, Tensor};
use tst::train::{self, TrainState};

#[derive(Parser)]
#[command(
    name = "tst",
    about = "Transformer toolkit for multivariate time series",
    version
)]
struct Cli {
    /// Worker threads (reserved; all built-in kernels currently run on one
    /// thread for reproducibility). Env: TST_THREADS.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonRun {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override. Env: TST_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Denoising pretraining with a reconstruction head.
    Pretrain(CommonRun),
    /// Supervised training from random initialization.
    Train {
        #[command(flatten)]
        common: CommonRun,
        /// Fraction of training samples that keep labels (overrides config).
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Supervised training initialized from a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: CommonRun,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        from: PathBuf,
        /// Train only the task head ("static representations").
        #[arg(long)]
        freeze: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Archive file to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        /// Dump per-sample predictions to this JSONL file.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Reconstruct masked values with a pretrained model.
    Impute {
        #[command(flatten)]
        common: CommonRun,
        /// Checkpoint with a reconstruction head.
        #[arg(long)]
        from: PathBuf,
        /// "generated" masks from the config, or "from-data-missing" to
        /// reconstruct exactly the positions that were missing in the raw
        /// archive.
        #[arg(long, default_value = "generated")]
        mask_source: String,
    },
    /// Emit mask fixtures for every variant.
    Masks {
        #[arg(long, default_value = "sep_stateful")]
        variant: String,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.15)]
        r: f64,
        #[arg(long, default_value_t = 3.0)]
        l_m: f64,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Output directory for the fixture files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the parameters of two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("TST_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(cli.threads);
    if threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(2);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain(common) => cmd_pretrain(&common),
        Cmd::Train { common, label_fraction } => cmd_train(&common, label_fraction, None, false),
        Cmd::Finetune { common, from, freeze } => {
            cmd_train(&common, None, Some(&from), freeze)
        }
        Cmd::Evaluate { checkpoint, dataset, dump, batch_size } => {
            cmd_evaluate(&checkpoint, &dataset, dump.as_deref(), batch_size)
        }
        Cmd::Impute { common, from, mask_source } => cmd_impute(&common, &from, &mask_source),
        Cmd::Masks { variant, w, m, count, seed, r, l_m, fraction, out } => {
            cmd_masks(&variant, w, m, count, seed, r, l_m, fraction, &out)
        }
        Cmd::Diff { a, b } => cmd_diff(&a, &b),
    }
}

struct Prepared {
    cfg: RunConfig,
    train: Dataset,
    test: Option<Dataset>,
    norm: NormInfo,
    out_dir: PathBuf,
    w: usize,
}

/// Load config + datasets, compute training-set normalization statistics,
/// and normalize both splits.
fn prepare(common: &CommonRun) -> Result<Prepared> {
    let cfg = tst::config::load(&common.config)?;
    let dataset_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("config is missing the 'dataset' path".into()))?;
    let train_raw = data::parse_archive(&dataset_path)?;
    let test_raw = match &cfg.test_dataset {
        Some(p) => Some(data::parse_archive(p)?),
        None => {
            let guess = guess_test_path(&dataset_path);
            match guess {
                Some(p) if p.exists() => Some(data::parse_archive(&p)?),
                _ => None,
            }
        }
    };
    let mode = cfg.norm_mode()?;
    let stats = data::compute_norm_stats(&train_raw)?;
    let train = data::normalize_dataset(&train_raw, &stats, mode);
    let test = test_raw.map(|t| data::normalize_dataset(&t, &stats, mode));
    let out_dir = std::env::var_os("TST_OUT_DIR")
        .map(PathBuf::from)
        .or_else(|| common.out.clone())
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let w = cfg.max_len.unwrap_or_else(|| train.max_len());
    Ok(Prepared { cfg, train, test, norm: NormInfo { stats, mode }, out_dir, w })
}

fn guess_test_path(train_path: &Path) -> Option<PathBuf> {
    let name = train_path.file_name()?.to_str()?;
    if name.contains("TRAIN") {
        Some(train_path.with_file_name(name.replace("TRAIN", "TEST")))
    } else {
        None
    }
}

fn cmd_pretrain(common: &CommonRun) -> Result<()> {
    let p = prepare(common)?;
    let seed = p.cfg.seed();
    let spec = p.cfg.resolve_mask()?;
    let model_cfg =
        p.cfg
            .resolve_model(p.train.m, p.w, Head::Reconstruction, Family::Unsupervised)?;
    let train_cfg = p.cfg.resolve_train(Family::Unsupervised)?;
    let (tr, val) = data::split_train_val(&p.train, p.cfg.val_split(), seed)?;

    let model = TSTModel::init(model_cfg.clone(), seed)?;
    let mut st = TrainState::new(model, seed);
    let outcome = train::pretrain(&mut st, &tr, &val, &train_cfg, &spec)?;

    let ckpt = Checkpoint {
        model: outcome.best_model,
        norm: Some(p.norm.clone()),
        epoch: outcome.best_epoch + 1,
        seed,
        opt: Some(st.opt.clone()),
    };
    let ckpt_path = p.out_dir.join("pretrain.ckpt");
    checkpoint::save(&ckpt, &ckpt_path)?;
    metrics::write_records(&outcome.records, &p.out_dir.join("pretrain_metrics.jsonl"))?;
    let eff = p.cfg.effective(&model_cfg, &train_cfg, Some(&spec));
    std::fs::write(p.out_dir.join("pretrain_config.toml"), eff.to_toml()?)?;
    println!(
        "pretrain done: best val masked_mse {:.6} at epoch {} -> {}",
        outcome.best_metric,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn task_head(ds: &Dataset) -> Result<Head> {
    if let Some(n) = ds.n_classes() {
        Ok(Head::Classification(n))
    } else if let Some(n) = ds.target_dim() {
        Ok(Head::Regression(n))
    } else {
        Err(Error::InvalidArgument(
            "dataset has neither class labels nor regression targets".into(),
        ))
    }
}

fn cmd_train(
    common: &CommonRun,
    label_fraction: Option<f64>,
    from: Option<&Path>,
    freeze: bool,
) -> Result<()> {
    let p = prepare(common)?;
    let seed = p.cfg.seed();
    let head = task_head(&p.train)?;
    let family = if from.is_some() { Family::Unsupervised } else { Family::Supervised };
    let model_cfg = p.cfg.resolve_model(p.train.m, p.w, head, family)?;
    let mut train_cfg = p.cfg.resolve_train(family)?;
    if freeze {
        train_cfg.freeze_all_but_head = true;
    }

    let mut full = p.train.clone();
    if let Some(fraction) = label_fraction.or(p.cfg.label_fraction) {
        full = data::subset_labels(&full, fraction, seed)?;
    }
    let (tr, val) = data::split_train_val(&full, p.cfg.val_split(), seed)?;

    let model = match from {
        None => TSTModel::init(model_cfg.clone(), seed)?,
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            if loaded.model.config.m != p.train.m {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects m={} but dataset has m={}",
                    loaded.model.config.m, p.train.m
                )));
            }
            if loaded.model.config.w != model_cfg.w {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects w={} but run resolves w={}",
                    loaded.model.config.w, model_cfg.w
                )));
            }
            let mut model = loaded.model;
            model.replace_head(head, seed)?;
            model
        }
    };

    let mut st = TrainState::new(model, seed);
    let outcome = train::train_supervised(&mut st, &tr, &val, &train_cfg)?;
    let mut best = outcome.best_model.clone();

    let stem = if from.is_some() { "finetune" } else { "train" };
    let ckpt = Checkpoint {
        model: outcome.best_model,
        norm: Some(p.norm.clone()),
        epoch: outcome.best_epoch + 1,
        seed,
        opt: Some(st.opt.clone()),
    };
    let ckpt_path = p.out_dir.join(format!("{stem}.ckpt"));
    checkpoint::save(&ckpt, &ckpt_path)?;
    metrics::write_records(&outcome.records, &p.out_dir.join(format!("{stem}_metrics.jsonl")))?;
    let eff = p.cfg.effective(&model_cfg, &train_cfg, None);
    std::fs::write(p.out_dir.join(format!("{stem}_config.toml")), eff.to_toml()?)?;

    println!(
        "{stem} done: best val {} {:.6} at epoch {} -> {}",
        if matches!(head, Head::Classification(_)) { "accuracy" } else { "rmse" },
        outcome.best_metric,
        outcome.best_epoch,
        ckpt_path.display()
    );
    if let Some(test) = &p.test {
        let report = train::evaluate(&mut best, test, train_cfg.batch_size, None)?;
        println!("test {} {:.6}", report.metric, report.value);
    }
    Ok(())
}

fn cmd_evaluate(
    ckpt_path: &Path,
    dataset: &Path,
    dump: Option<&Path>,
    batch_size: usize,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let raw = data::parse_archive(dataset)?;
    if raw.m != ckpt.model.config.m {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects m={} but dataset has m={}",
            ckpt.model.config.m, raw.m
        )));
    }
    let ds = match &ckpt.norm {
        Some(info) => data::normalize_dataset(&raw, &info.stats, info.mode),
        None => raw,
    };
    let mut model = ckpt.model;
    let spec = MaskSpec { seed: ckpt.seed, ..MaskSpec::default() };
    let mask_arg = matches!(model.config.head, Head::Reconstruction).then_some(&spec);
    let report = train::evaluate(&mut model, &ds, batch_size, mask_arg)?;
    println!("{} {:.6}", report.metric, report.value);
    if let Some(path) = dump {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, row) in report.predictions.iter().enumerate() {
            let line = serde_json::json!({
                "sample": i,
                "prediction": row,
                "class": report.pred_classes.get(i),
            });
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn cmd_impute(common: &CommonRun, from: &Path, mask_source: &str) -> Result<()> {
    let p = prepare(common)?;
    let ckpt = checkpoint::load(from)?;
    if ckpt.model.config.head != Head::Reconstruction {
        return Err(Error::InvalidArgument(
            "imputation needs a checkpoint with a reconstruction head".into(),
        ));
    }
    if ckpt.model.config.m != p.train.m {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects m={} but dataset has m={}",
            ckpt.model.config.m, p.train.m
        )));
    }
    let mut model = ckpt.model;
    let w = model.config.w;
    let m = model.config.m;
    let spec = p.cfg.resolve_mask()?;
    let ds = &p.train;

    use std::io::Write;
    let dump_path = p.out_dir.join("imputations.jsonl");
    let mut dump = std::io::BufWriter::new(std::fs::File::create(&dump_path)?);
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (si, sample) in ds.samples.iter().enumerate() {
        let len = sample.len.min(w);
        let mask = match mask_source {
            "generated" => {
                let mut rng = derive(spec.seed, &[0x1113, si as u64]);
                masking::generate(len, m, &spec, &mut rng)?
            }
            "from-data-missing" => {
                let mut bits = vec![1u8; len * m];
                for &(t, i) in &sample.missing {
                    if t < len {
                        bits[t * m + i] = 0;
                    }
                }
                NoiseMask::new(len, m, bits)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown mask source '{other}' (generated | from-data-missing)"
                )))
            }
        };
        if mask.masked_count() == 0 {
            continue;
        }
        let truth = sample.to_tensor();
        let corrupted = masking::apply_mask(
            &Tensor::new(vec![len, m], truth.data()[..len * m].to_vec()),
            &mask,
        )?;
        let mut x = vec![0.0; w * m];
        x[..len * m].copy_from_slice(corrupted.data());
        let tape = Tape::new();
        let rng = derive(spec.seed, &[0x1114]);
        let mut fwd = model.forward(&tape, Mode::Eval, rng, Trainable::None);
        let (z, _) = fwd.encode(&Tensor::new(vec![1, w, m], x), &[len])?;
        let x_hat = fwd.head_reconstruct(z)?;
        let out = x_hat.value();

        let mut cells = Vec::new();
        for (t, i) in mask.masked_index_set() {
            let pred = out.data()[t * m + i];
            let tru = truth.data()[t * m + i];
            preds.push(pred);
            truths.push(tru);
            cells.push(serde_json::json!({ "t": t, "var": i, "truth": tru, "pred": pred }));
        }
        let line = serde_json::json!({ "sample": sample.id, "masked": cells });
        writeln!(dump, "{line}")?;
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no masked positions to impute".into()));
    }
    let rmse = metrics::rmse(&preds, &truths)?;
    println!("masked_rmse {:.6} over {} cells -> {}", rmse, preds.len(), dump_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_masks(
    variant: &str,
    w: usize,
    m: usize,
    count: usize,
    seed: u64,
    r: f64,
    l_m: f64,
    fraction: f64,
    out: &Path,
) -> Result<()> {
    let variant = match variant {
        "sep_stateful" => MaskVariant::SepStateful,
        "sep_bernoulli" => MaskVariant::SepBernoulli,
        "sync_stateful" => MaskVariant::SyncStateful,
        "sync_bernoulli" => MaskVariant::SyncBernoulli,
        "forecast" => MaskVariant::Forecast,
        other => return Err(Error::InvalidArgument(format!("unknown mask variant '{other}'"))),
    };
    let spec = MaskSpec { variant, r, l_m, forecast_fraction: fraction, seed };
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let mut rng = derive(seed, &[i as u64]);
        let mask = masking::generate(w, m, &spec, &mut rng)?;
        let path = out.join(format!("{}_{i}.mask", variant_name(variant)));
        masking::write_fixture(&mask, &path)?;
        println!(
            "{} masked_fraction {:.4}",
            path.display(),
            mask.masked_fraction()
        );
    }
    Ok(())
}

fn variant_name(v: MaskVariant) -> &'static str {
    match v {
        MaskVariant::SepStateful => "sep_stateful",
        MaskVariant::SepBernoulli => "sep_bernoulli",
        MaskVariant::SyncStateful => "sync_stateful",
        MaskVariant::SyncBernoulli => "sync_bernoulli",
        MaskVariant::Forecast => "forecast",
    }
}

fn cmd_diff(a: &Path, b: &Path) -> Result<()> {
    let ca = checkpoint::load(a)?;
    let cb = checkpoint::load(b)?;
    let diffs = checkpoint::diff(&ca, &cb);
    if diffs.is_empty() {
        println!("identical parameters");
    } else {
        for (name, max) in &diffs {
            println!("{name}\tmax_abs_diff {max:.6e}");
        }
    }
    Ok(())
}
