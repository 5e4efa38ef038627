//! Training loops: denoising pretraining, supervised training, fine-tuning,
//! Adam, and evaluation.
//!
//! All randomness (shuffling, masks, dropout) is drawn from streams derived
//! from the base seed plus structural labels (epoch, batch, sample), so a
//! run resumed from a checkpoint reproduces the uninterrupted trajectory
//! bitwise without serializing generator state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{pad_and_batch, Batch, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::masking::{self, MaskSpec, NoiseMask};
use crate::metrics::{self, MetricRecord};
use crate::model::{Head, TSTModel, Trainable};
use crate::rng::derive;
use crate::tensor::{Mode, Tape, Tensor, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// Stream labels keeping the derived RNG uses disjoint.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_VAL_MASK: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_all_but_head: bool,
    /// Early-stopping patience in epochs; `None` trains for the full budget.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            epochs: 100,
            seed: 42,
            freeze_all_but_head: false,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam first/second moment accumulators, keyed like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam update over the given (name, gradient) pairs.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Masked mean-squared error: per sample, average the squared error over its
/// masked cells, then average across samples that have at least one masked
/// cell. Unmasked and padded cells carry weight exactly 0, so perturbing the
/// reconstruction there cannot change the loss even bitwise.
pub fn masked_mse_loss<'t>(
    x_hat: Var<'t>,
    x: &Tensor,
    masks: &[NoiseMask],
    lengths: &[usize],
) -> Result<Var<'t>> {
    let shape = x_hat.shape();
    if shape.len() != 3 || x.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse_loss",
            left: shape,
            right: x.shape().to_vec(),
        });
    }
    let (bsz, w, m) = (shape[0], shape[1], shape[2]);
    if masks.len() != bsz || lengths.len() != bsz {
        return Err(Error::InvalidArgument(format!(
            "masked_mse_loss: {} masks / {} lengths for batch of {bsz}",
            masks.len(),
            lengths.len()
        )));
    }
    let mut weights = vec![0.0; bsz * w * m];
    let mut active = 0usize;
    for (b, mask) in masks.iter().enumerate() {
        let (mw, mm) = mask.dims();
        if mw != lengths[b] || mm != m {
            return Err(Error::InvalidArgument(format!(
                "mask dims ({mw},{mm}) for sample of length {} with {m} variables",
                lengths[b]
            )));
        }
        let count = mask.masked_count();
        if count == 0 {
            eprintln!("warning: sample {b} in batch has an empty mask; skipped");
            continue;
        }
        active += 1;
        let inv = 1.0 / count as f64;
        for t in 0..mw {
            for i in 0..m {
                if mask.is_masked(t, i) {
                    weights[(b * w + t) * m + i] = inv;
                }
            }
        }
    }
    if active == 0 {
        return Err(Error::InvalidArgument("every sample in the batch has an empty mask".into()));
    }
    let scale = 1.0 / active as f64;
    let tape = x_hat.tape();
    let target = tape.constant(x.clone());
    let wt = tape.constant(Tensor::new(vec![bsz, w, m], weights));
    let diff = x_hat.sub(target)?;
    Ok(diff.mul(diff)?.mul(wt)?.sum_all().scale(scale))
}

/// Supervised loss: mean squared-error norm per sample for regression,
/// mean softmax cross-entropy for classification.
pub fn supervised_loss<'t>(y_hat: Var<'t>, labels: &[Label], head: Head) -> Result<Var<'t>> {
    let shape = y_hat.shape();
    let bsz = shape[0];
    if labels.len() != bsz {
        return Err(Error::InvalidArgument(format!(
            "{} labels for batch of {bsz}",
            labels.len()
        )));
    }
    match head {
        Head::Classification(n) => {
            let classes: Result<Vec<usize>> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) if *c < n => Ok(*c),
                    other => Err(Error::InvalidArgument(format!("bad class label {other:?}"))),
                })
                .collect();
            y_hat.cross_entropy_mean(&classes?)
        }
        Head::Regression(n) => {
            let mut target = vec![0.0; bsz * n];
            for (b, l) in labels.iter().enumerate() {
                match l {
                    Label::Value(v) if v.len() == n => {
                        target[b * n..(b + 1) * n].copy_from_slice(v)
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "bad regression target {other:?}"
                        )))
                    }
                }
            }
            let t = y_hat.tape().constant(Tensor::new(vec![bsz, n], target));
            let diff = y_hat.sub(t)?;
            Ok(diff.mul(diff)?.sum_all().scale(1.0 / bsz as f64))
        }
        Head::Reconstruction => {
            Err(Error::InvalidArgument("supervised_loss with reconstruction head".into()))
        }
    }
}

/// Resumable training position: model, optimizer, completed epochs, seed.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TSTModel,
    pub opt: AdamState,
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: TSTModel, seed: u64) -> Self {
        TrainState { model, opt: AdamState::new(), epoch: 0, seed }
    }
}

/// Best-by-validation snapshot plus the per-epoch metric log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_model: TSTModel,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub records: Vec<MetricRecord>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive(seed, &[STREAM_SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);
    order
}

fn check_finite(loss: f64, epoch: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}")));
    }
    Ok(loss)
}

fn collect_grads(tape: &Tape, vars: &BTreeMap<String, Var<'_>>) -> BTreeMap<String, Tensor> {
    vars.iter()
        .filter(|(_, v)| v.requires_grad())
        .filter_map(|(name, v)| tape.grad(*v).map(|g| (name.clone(), g)))
        .collect()
}

fn batch_of(ds: &Dataset, order: &[usize], w: usize) -> Result<Batch> {
    let samples: Vec<&Sample> = order.iter().map(|&i| &ds.samples[i]).collect();
    pad_and_batch(&samples, order, w, 0.0)
}

/// Mask for one sample at one epoch, derived statelessly. Masks cover only
/// the real (non-padded) positions.
fn sample_mask(
    spec: &MaskSpec,
    len: usize,
    m: usize,
    stream: u64,
    epoch: usize,
    sample: usize,
) -> Result<NoiseMask> {
    let mut rng = derive(spec.seed, &[stream, epoch as u64, sample as u64]);
    masking::generate(len, m, spec, &mut rng)
}

/// Denoising pretraining (labels are never read). Runs from the state's
/// current epoch up to `cfg.epochs`, selecting the best model by validation
/// masked MSE.
pub fn pretrain(
    st: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    spec: &MaskSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if st.model.config.head != Head::Reconstruction {
        return Err(Error::InvalidArgument("pretraining requires a reconstruction head".into()));
    }
    let w = st.model.config.w;
    let m = st.model.config.m;
    let mut records = Vec::new();
    let mut best: Option<(f64, TSTModel, usize)> = None;
    let mut since_best = 0usize;

    while st.epoch < cfg.epochs {
        let epoch = st.epoch;
        let order = epoch_order(train.len(), st.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_of(train, chunk, w)?;
            let masks: Vec<NoiseMask> = batch
                .lengths
                .iter()
                .zip(&batch.sample_indices)
                .map(|(&len, &si)| sample_mask(spec, len, m, STREAM_MASK, epoch, si))
                .collect::<Result<_>>()?;
            let corrupted = corrupt_batch(&batch, &masks)?;

            let tape = Tape::new();
            let drop_rng = derive(st.seed, &[STREAM_DROPOUT, epoch as u64, bi as u64]);
            let mut fwd = st.model.forward(&tape, Mode::Train, drop_rng, Trainable::All);
            let (z, lens) = fwd.encode(&corrupted, &batch.lengths)?;
            let x_hat = fwd.head_reconstruct(z)?;
            let loss = masked_mse_loss(x_hat, &batch.x, &masks, &lens)?;
            epoch_loss += check_finite(loss.value().item(), epoch)?;
            n_batches += 1;
            let vars = fwd.vars.clone();
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &vars);
            adam_step(&mut st.model.params, &grads, &mut st.opt, cfg.lr)?;
        }
        st.epoch += 1;

        let train_loss = epoch_loss / n_batches.max(1) as f64;
        let val_loss = eval_masked_mse(&mut st.model, val, spec, cfg.batch_size)?;
        records.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "masked_mse".into(),
            value: train_loss,
        });
        records.push(MetricRecord {
            epoch,
            split: "val".into(),
            metric: "masked_mse".into(),
            value: val_loss,
        });

        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, st.model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (best_metric, best_model, best_epoch) =
        best.ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))?;
    Ok(TrainOutcome { best_model, best_epoch, best_metric, records })
}

fn corrupt_batch(batch: &Batch, masks: &[NoiseMask]) -> Result<Tensor> {
    let shape = batch.x.shape().to_vec();
    let (w, m) = (shape[1], shape[2]);
    let mut data = batch.x.data().to_vec();
    for (b, mask) in masks.iter().enumerate() {
        let (mw, _) = mask.dims();
        for t in 0..mw.min(w) {
            for i in 0..m {
                if mask.is_masked(t, i) {
                    data[(b * w + t) * m + i] = 0.0;
                }
            }
        }
    }
    Ok(Tensor::new(shape, data))
}

/// Validation masked MSE with per-sample masks fixed across epochs.
fn eval_masked_mse(
    model: &mut TSTModel,
    ds: &Dataset,
    spec: &MaskSpec,
    batch_size: usize,
) -> Result<f64> {
    let w = model.config.w;
    let m = model.config.m;
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in order.chunks(batch_size) {
        let batch = batch_of(ds, chunk, w)?;
        let masks: Vec<NoiseMask> = batch
            .lengths
            .iter()
            .zip(&batch.sample_indices)
            .map(|(&len, &si)| sample_mask(spec, len, m, STREAM_VAL_MASK, 0, si))
            .collect::<Result<_>>()?;
        let corrupted = corrupt_batch(&batch, &masks)?;
        let tape = Tape::new();
        let rng = derive(spec.seed, &[STREAM_VAL_MASK]);
        let mut fwd = model.forward(&tape, Mode::Eval, rng, Trainable::None);
        let (z, lens) = fwd.encode(&corrupted, &batch.lengths)?;
        let x_hat = fwd.head_reconstruct(z)?;
        let loss = masked_mse_loss(x_hat, &batch.x, &masks, &lens)?;
        total += loss.value().item();
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Supervised training (fresh or from a pretrained encoder; the caller
/// replaces the head beforehand for fine-tuning). Only labeled samples are
/// used. Early stopping and best-model selection use the validation metric:
/// accuracy for classification, RMSE-style loss for regression.
pub fn train_supervised(
    st: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let head = st.model.config.head;
    if head == Head::Reconstruction {
        return Err(Error::InvalidArgument("train_supervised requires a task head".into()));
    }
    let w = st.model.config.w;
    let labeled: Vec<usize> = (0..train.len())
        .filter(|&i| train.samples[i].label.is_some())
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled samples to train on".into()));
    }
    let trainable = if cfg.freeze_all_but_head { Trainable::HeadOnly } else { Trainable::All };
    // A frozen encoder keeps its running statistics frozen too: run the
    // whole forward in eval mode semantics for norm layers would disturb
    // dropout, so instead we snapshot and restore the statistics.
    let frozen_bn = cfg.freeze_all_but_head.then(|| st.model.bn.clone());

    let lower_is_better = matches!(head, Head::Regression(_));
    let metric_name = match head {
        Head::Classification(_) => "accuracy",
        _ => "rmse",
    };
    let mut records = Vec::new();
    let mut best: Option<(f64, TSTModel, usize)> = None;
    let mut since_best = 0usize;

    while st.epoch < cfg.epochs {
        let epoch = st.epoch;
        let perm = epoch_order(labeled.len(), st.seed, epoch);
        let order: Vec<usize> = perm.into_iter().map(|i| labeled[i]).collect();
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_of(train, chunk, w)?;
            let labels: Vec<Label> =
                batch.labels.iter().map(|l| l.clone().expect("labeled subset")).collect();
            let tape = Tape::new();
            let drop_rng = derive(st.seed, &[STREAM_DROPOUT, epoch as u64, bi as u64]);
            let mut fwd = st.model.forward(&tape, Mode::Train, drop_rng, trainable);
            let (z, lens) = fwd.encode(&batch.x, &batch.lengths)?;
            let y_hat = fwd.head_predict(z, &lens)?;
            let loss = supervised_loss(y_hat, &labels, head)?;
            epoch_loss += check_finite(loss.value().item(), epoch)?;
            n_batches += 1;
            let vars = fwd.vars.clone();
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &vars);
            adam_step(&mut st.model.params, &grads, &mut st.opt, cfg.lr)?;
        }
        if let Some(bn) = &frozen_bn {
            st.model.bn = bn.clone();
        }
        st.epoch += 1;

        let train_loss = epoch_loss / n_batches.max(1) as f64;
        let report = evaluate(&mut st.model, val, cfg.batch_size, None)?;
        let val_metric = report.value;
        records.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: train_loss,
        });
        records.push(MetricRecord {
            epoch,
            split: "val".into(),
            metric: metric_name.into(),
            value: val_metric,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| {
            if lower_is_better {
                val_metric < *b
            } else {
                val_metric > *b
            }
        });
        if improved {
            best = Some((val_metric, st.model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (best_metric, best_model, best_epoch) =
        best.ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))?;
    Ok(TrainOutcome { best_model, best_epoch, best_metric, records })
}

/// Evaluation report: headline metric plus raw per-sample predictions.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    /// Raw model outputs, one row per sample (logits for classification).
    pub predictions: Vec<Vec<f64>>,
    /// Argmax classes for classification, empty otherwise.
    pub pred_classes: Vec<usize>,
}

/// Evaluate on labeled data: accuracy for classification, RMSE for
/// regression, masked MSE for reconstruction (which needs `mask_spec`).
pub fn evaluate(
    model: &mut TSTModel,
    ds: &Dataset,
    batch_size: usize,
    mask_spec: Option<&MaskSpec>,
) -> Result<EvalReport> {
    match model.config.head {
        Head::Reconstruction => {
            let spec = mask_spec.ok_or_else(|| {
                Error::InvalidArgument("reconstruction evaluation needs a mask spec".into())
            })?;
            let value = eval_masked_mse(model, ds, spec, batch_size)?;
            Ok(EvalReport {
                metric: "masked_mse".into(),
                value,
                predictions: Vec::new(),
                pred_classes: Vec::new(),
            })
        }
        head => {
            let w = model.config.w;
            let order: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.samples[i].label.is_some())
                .collect();
            if order.is_empty() {
                return Err(Error::InvalidArgument("no labeled samples to evaluate".into()));
            }
            let mut predictions = Vec::with_capacity(order.len());
            let mut labels = Vec::with_capacity(order.len());
            for chunk in order.chunks(batch_size) {
                let batch = batch_of(ds, chunk, w)?;
                let tape = Tape::new();
                let rng = derive(0, &[0]);
                let mut fwd = model.forward(&tape, Mode::Eval, rng, Trainable::None);
                let (z, lens) = fwd.encode(&batch.x, &batch.lengths)?;
                let y = fwd.head_predict(z, &lens)?;
                let out = y.value();
                let n = out.shape()[1];
                for b in 0..batch.size() {
                    predictions.push(out.data()[b * n..(b + 1) * n].to_vec());
                    labels.push(batch.labels[b].clone().expect("labeled"));
                }
            }
            match head {
                Head::Classification(_) => {
                    let pred_classes: Vec<usize> = predictions
                        .iter()
                        .map(|row| {
                            row.iter()
                                .enumerate()
                                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                                .map(|(i, _)| i)
                                .unwrap_or(0)
                        })
                        .collect();
                    let truth: Vec<usize> = labels
                        .iter()
                        .map(|l| match l {
                            Label::Class(c) => Ok(*c),
                            other => Err(Error::InvalidArgument(format!(
                                "expected class label, got {other:?}"
                            ))),
                        })
                        .collect::<Result<_>>()?;
                    let value = metrics::accuracy(&pred_classes, &truth)?;
                    Ok(EvalReport {
                        metric: "accuracy".into(),
                        value,
                        predictions,
                        pred_classes,
                    })
                }
                _ => {
                    let flat_pred: Vec<f64> = predictions.iter().flatten().copied().collect();
                    let flat_truth: Vec<f64> = labels
                        .iter()
                        .flat_map(|l| match l {
                            Label::Value(v) => v.clone(),
                            Label::Class(c) => vec![*c as f64],
                        })
                        .collect();
                    let value = metrics::rmse(&flat_pred, &flat_truth)?;
                    Ok(EvalReport {
                        metric: "rmse".into(),
                        value,
                        predictions,
                        pred_classes: Vec::new(),
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskVariant;
    use crate::model::{InputProjection, ModelConfig, NormKind, PosEncoding};

    fn config(head: Head) -> ModelConfig {
        ModelConfig {
            m: 1,
            w: 8,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 16,
            dropout_p: 0.0,
            activation: "gelu".into(),
            norm_kind: NormKind::Batch,
            pos_encoding: PosEncoding::Learnable,
            input_projection: InputProjection::Linear,
            head,
        }
    }

    fn sinusoid_dataset(n: usize, len: usize, labels: bool) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n {
            let phase = i as f64 * 0.7;
            let values: Vec<f64> = (0..len)
                .map(|t| (t as f64 * 0.8 + phase).sin())
                .collect();
            samples.push(Sample {
                id: format!("{i}"),
                values,
                len,
                m: 1,
                label: labels.then(|| Label::Class(i % 2)),
                ..Sample::default()
            });
        }
        Dataset {
            name: "toy".into(),
            m: 1,
            samples,
            class_labels: labels.then(|| vec!["a".into(), "b".into()]),
        }
    }

    fn mask_spec() -> MaskSpec {
        MaskSpec {
            variant: MaskVariant::SepStateful,
            r: 0.25,
            l_m: 2.0,
            seed: 5,
            forecast_fraction: 0.0,
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![1.0, -2.0]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params["w"].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_bounded() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![1.0]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![0.3]))]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        let delta = (params["w"].data()[0] - 1.0).abs();
        assert!(delta > 0.0 && delta <= 0.01 * 1.0001, "delta {delta}");
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![1.0]))]);
        let mut state = AdamState::new();
        for _ in 0..200 {
            let theta = params["w"].data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![2.0 * theta]))]);
            adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        }
        assert!(params["w"].data()[0].abs() < 0.05);
    }

    #[test]
    fn masked_loss_hand_values() {
        let tape = Tape::new();
        let x = Tensor::zeros(vec![1, 2, 1]);
        let mut x_hat_t = x.clone();
        x_hat_t.data_mut()[0] = 2.0; // error 2 at the single masked cell
        let x_hat = tape.leaf(x_hat_t, true);
        let mask = NoiseMask::new(2, 1, vec![0, 1]); // cell (0,0) masked
        let loss = masked_mse_loss(x_hat, &x, &[mask.clone()], &[2]).unwrap();
        assert_eq!(loss.value().item(), 4.0);

        // perfect reconstruction -> 0
        let perfect = tape.leaf(x.clone(), true);
        let loss0 = masked_mse_loss(perfect, &x, &[mask], &[2]).unwrap();
        assert_eq!(loss0.value().item(), 0.0);
    }

    #[test]
    fn masked_loss_ignores_unmasked_cells_bitwise() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5]);
        let mask = NoiseMask::new(3, 2, vec![0, 1, 1, 1, 1, 1]);
        let base = tape.constant(Tensor::new(vec![1, 3, 2], vec![9.0; 6]));
        let l1 = masked_mse_loss(base, &x, &[mask.clone()], &[3]).unwrap().value().item();
        // perturb an unmasked cell and a padded... all but (0,0) are unmasked
        let mut perturbed = vec![9.0; 6];
        perturbed[1] = -123.456;
        perturbed[5] = 7.89;
        let p = tape.constant(Tensor::new(vec![1, 3, 2], perturbed));
        let l2 = masked_mse_loss(p, &x, &[mask], &[3]).unwrap().value().item();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn supervised_loss_values() {
        let tape = Tape::new();
        // regression: exact prediction -> 0
        let y = tape.constant(Tensor::new(vec![2, 1], vec![1.0, -2.0]));
        let labels = vec![Label::Value(vec![1.0]), Label::Value(vec![-2.0])];
        let loss = supervised_loss(y, &labels, Head::Regression(1)).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        // classification: extreme logits on the true class -> ~0
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![50.0, -50.0]));
        let l = supervised_loss(logits, &[Label::Class(0)], Head::Classification(2)).unwrap();
        assert!(l.value().item() < 1e-12);
    }

    #[test]
    fn pretraining_overfits_small_dataset() {
        let ds = sinusoid_dataset(8, 16, false);
        let mut mcfg = config(Head::Reconstruction);
        mcfg.w = 16;
        mcfg.d_model = 16;
        mcfg.d_ff = 32;
        let model = TSTModel::init(mcfg, 3).unwrap();
        let mut st = TrainState::new(model, 3);
        let cfg = TrainConfig {
            epochs: 600,
            batch_size: 8,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let out = pretrain(&mut st, &ds, &ds, &cfg, &mask_spec()).unwrap();
        assert!(out.best_metric < 0.05, "best masked MSE {}", out.best_metric);
    }

    #[test]
    fn pretraining_is_label_blind() {
        let with = sinusoid_dataset(6, 8, true);
        let without = sinusoid_dataset(6, 8, false);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let run = |ds: &Dataset| {
            let model = TSTModel::init(config(Head::Reconstruction), 11).unwrap();
            let mut st = TrainState::new(model, 11);
            pretrain(&mut st, ds, ds, &cfg, &mask_spec()).unwrap();
            st.model.params
        };
        let a = run(&with);
        let b = run(&without);
        assert_eq!(a, b, "labels must not influence pretraining");
    }

    #[test]
    fn masks_differ_across_epochs() {
        let spec = mask_spec();
        let m0 = sample_mask(&spec, 50, 2, STREAM_MASK, 0, 7).unwrap();
        let m1 = sample_mask(&spec, 50, 2, STREAM_MASK, 1, 7).unwrap();
        assert_ne!(m0.bits(), m1.bits());
        // and are reproducible within an epoch
        let again = sample_mask(&spec, 50, 2, STREAM_MASK, 0, 7).unwrap();
        assert_eq!(m0.bits(), again.bits());
    }

    #[test]
    fn supervised_overfits_toy_classification() {
        let ds = sinusoid_dataset(8, 8, true);
        let model = TSTModel::init(config(Head::Classification(2)), 3).unwrap();
        let mut st = TrainState::new(model, 3);
        let cfg = TrainConfig { epochs: 300, batch_size: 8, ..TrainConfig::default() };
        let out = train_supervised(&mut st, &ds, &ds, &cfg).unwrap();
        assert!(out.best_metric >= 0.999, "train accuracy {}", out.best_metric);
    }

    #[test]
    fn freezing_keeps_encoder_bitwise() {
        let ds = sinusoid_dataset(8, 8, true);
        let model = TSTModel::init(config(Head::Classification(2)), 9).unwrap();
        let before = model.params.clone();
        let mut st = TrainState::new(model, 9);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            freeze_all_but_head: true,
            ..TrainConfig::default()
        };
        train_supervised(&mut st, &ds, &ds, &cfg).unwrap();
        for (name, t) in &st.model.params {
            if name.starts_with("head.") {
                continue;
            }
            assert_eq!(t, &before[name], "{name} changed despite freeze");
        }
        assert_ne!(st.model.params["head.w"], before["head.w"]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = sinusoid_dataset(6, 8, true);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let model = TSTModel::init(config(Head::Classification(2)), 13).unwrap();
            let mut st = TrainState::new(model, 13);
            train_supervised(&mut st, &ds, &ds, &cfg).unwrap().records
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_matches_recomputation() {
        let ds = sinusoid_dataset(8, 8, true);
        let mut model = TSTModel::init(config(Head::Classification(2)), 3).unwrap();
        let report = evaluate(&mut model, &ds, 4, None).unwrap();
        let truth: Vec<usize> = ds
            .samples
            .iter()
            .map(|s| match s.label {
                Some(Label::Class(c)) => c,
                _ => unreachable!(),
            })
            .collect();
        let recomputed = metrics::accuracy(&report.pred_classes, &truth).unwrap();
        assert!((report.value - recomputed).abs() < 1e-12);
    }
}
