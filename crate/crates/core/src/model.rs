//! Transformer encoder for multivariate time series.
//!
//! Input projection (linear or 1D-convolutional), learnable or sinusoidal
//! positional encodings, multi-head self-attention with an additive padding
//! bias, post-norm encoder blocks normalized with batch norm over time steps
//! (layer norm selectable), and per-task output heads.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive;
use crate::tensor::{BnState, Mode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Learnable,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputProjection {
    Linear,
    Conv1d { kernel: usize, stride: usize, dilation: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum Head {
    Reconstruction,
    Regression(usize),
    Classification(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of input variables.
    pub m: usize,
    /// Maximum sequence length.
    pub w: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    /// Only "gelu" is supported.
    pub activation: String,
    pub norm_kind: NormKind,
    pub pos_encoding: PosEncoding,
    pub input_projection: InputProjection,
    pub head: Head,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.w < 1 {
            return Err(Error::Config(format!(
                "m and w must be >= 1 (got m={}, w={})",
                self.m, self.w
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_blocks and d_ff must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        if self.activation != "gelu" {
            return Err(Error::Config(format!(
                "unsupported activation '{}' (only gelu)",
                self.activation
            )));
        }
        if let InputProjection::Conv1d { kernel, stride, dilation } = self.input_projection {
            if kernel == 0 || stride == 0 || dilation == 0 {
                return Err(Error::Config("conv kernel/stride/dilation must be >= 1".into()));
            }
            if dilation * (kernel - 1) + 1 > self.w {
                return Err(Error::Config(format!(
                    "conv kernel span {} exceeds w={}",
                    dilation * (kernel - 1) + 1,
                    self.w
                )));
            }
        }
        match self.head {
            Head::Regression(n) | Head::Classification(n) if n == 0 => {
                Err(Error::Config("head output size must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sequence length after input projection (differs from `w` only for
    /// strided convolutional projection).
    pub fn proj_width(&self) -> usize {
        match self.input_projection {
            InputProjection::Linear => self.w,
            InputProjection::Conv1d { kernel, stride, dilation } => {
                // "same" padding when stride is 1, valid otherwise
                if stride == 1 {
                    self.w
                } else {
                    let span = dilation * (kernel - 1) + 1;
                    (self.w - span) / stride + 1
                }
            }
        }
    }

    fn head_out(&self) -> usize {
        match self.head {
            Head::Reconstruction => self.m,
            Head::Regression(n) | Head::Classification(n) => n,
        }
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let proj = match self.input_projection {
            InputProjection::Linear => d * self.m + d,
            InputProjection::Conv1d { kernel, .. } => d * kernel * self.m + d,
        };
        let pos = match self.pos_encoding {
            PosEncoding::Learnable => self.proj_width() * d,
            PosEncoding::Sinusoidal => 0,
        };
        let per_block = 4 * (d * d + d)       // q, k, v, output projections
            + 2 * (2 * d)                     // two norm sites (gamma, beta)
            + d * self.d_ff + self.d_ff       // ff first layer
            + self.d_ff * d + d; // ff second layer
        let head = match self.head {
            Head::Reconstruction => self.m * d + self.m,
            Head::Regression(n) | Head::Classification(n) => n * (d * self.proj_width()) + n,
        };
        proj + pos + self.n_blocks * per_block + head
    }
}

/// Whether a parameter receives gradients in the current pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    None,
}

impl Trainable {
    fn includes(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::HeadOnly => name.starts_with("head."),
            Trainable::None => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TSTModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub bn: BTreeMap<String, BnState>,
}

fn name_seed(name: &str) -> u64 {
    // FNV-1a so each parameter gets its own derived stream
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

impl TSTModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut bn: BTreeMap<String, BnState> = BTreeMap::new();
        let xavier = |name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let mut rng = derive(seed, &[name_seed(name)]);
            Tensor::xavier(shape, fan_in, fan_out, &mut rng)
        };

        match config.input_projection {
            InputProjection::Linear => {
                params.insert("embed.w".into(), xavier("embed.w", vec![d, config.m], config.m, d));
            }
            InputProjection::Conv1d { kernel, .. } => {
                params.insert(
                    "embed.k".into(),
                    xavier("embed.k", vec![d, kernel, config.m], kernel * config.m, d),
                );
            }
        }
        params.insert("embed.b".into(), Tensor::zeros(vec![d]));

        if config.pos_encoding == PosEncoding::Learnable {
            let mut rng = derive(seed, &[name_seed("pos.w")]);
            params.insert("pos.w".into(), Tensor::uniform(vec![config.proj_width(), d], 0.02, &mut rng));
        }

        for i in 0..config.n_blocks {
            for part in ["wq", "wk", "wv", "wo"] {
                let name = format!("block{i}.attn.{part}");
                params.insert(name.clone(), xavier(&name, vec![d, d], d, d));
                params.insert(format!("block{i}.attn.b{}", &part[1..]), Tensor::zeros(vec![d]));
            }
            let w1 = format!("block{i}.ff.w1");
            params.insert(w1.clone(), xavier(&w1, vec![d, config.d_ff], d, config.d_ff));
            params.insert(format!("block{i}.ff.b1"), Tensor::zeros(vec![config.d_ff]));
            let w2 = format!("block{i}.ff.w2");
            params.insert(w2.clone(), xavier(&w2, vec![config.d_ff, d], config.d_ff, d));
            params.insert(format!("block{i}.ff.b2"), Tensor::zeros(vec![d]));
            for site in ["norm1", "norm2"] {
                params.insert(format!("block{i}.{site}.gamma"), Tensor::full(vec![d], 1.0));
                params.insert(format!("block{i}.{site}.beta"), Tensor::zeros(vec![d]));
                if config.norm_kind == NormKind::Batch {
                    bn.insert(format!("block{i}.{site}"), BnState::new(d));
                }
            }
        }

        let (head_in, head_out) = match config.head {
            Head::Reconstruction => (d, config.m),
            _ => (d * config.proj_width(), config.head_out()),
        };
        params.insert("head.w".into(), xavier("head.w", vec![head_in, head_out], head_in, head_out));
        params.insert("head.b".into(), Tensor::zeros(vec![head_out]));

        Ok(TSTModel { config, params, bn })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replace the head with freshly initialized parameters for a new task.
    pub fn replace_head(&mut self, head: Head, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.head = head;
        config.validate()?;
        let fresh = TSTModel::init(config.clone(), seed)?;
        self.params.insert("head.w".into(), fresh.params["head.w"].clone());
        self.params.insert("head.b".into(), fresh.params["head.b"].clone());
        self.config = config;
        Ok(())
    }

    /// Bind parameters to a tape for one forward/backward pass.
    pub fn forward<'t, 'm>(
        &'m mut self,
        tape: &'t Tape,
        mode: Mode,
        rng: ChaCha8Rng,
        trainable: Trainable,
    ) -> Forward<'t, 'm> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                (name.clone(), tape.leaf(value.clone(), trainable.includes(name)))
            })
            .collect();
        Forward { model: self, tape, vars, mode, rng }
    }
}

/// Additive attention bias built from sample lengths: 0 for real key
/// positions, a large negative value for padded ones.
pub fn build_padding_mask(lengths: &[usize], w: usize) -> Result<Tensor> {
    let mut data = vec![0.0; lengths.len() * w];
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > w {
            return Err(Error::InvalidArgument(format!(
                "sample length {len} outside 1..={w}"
            )));
        }
        for t in len..w {
            data[b * w + t] = -1e9;
        }
    }
    Ok(Tensor::new(vec![lengths.len(), w], data))
}

fn sinusoidal_encoding(w: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; w * d];
    for t in 0..w {
        for j in 0..d {
            let angle = t as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![w, d], data)
}

/// One forward pass over a tape. Holds the parameter bindings, the dropout
/// stream, and mutable access to batch-norm running statistics.
pub struct Forward<'t, 'm> {
    model: &'m mut TSTModel,
    pub tape: &'t Tape,
    pub vars: BTreeMap<String, Var<'t>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'t, 'm> Forward<'t, 'm> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn var(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    fn dropout(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        let p = self.model.config.dropout_p;
        if p == 0.0 {
            return Ok(x);
        }
        x.dropout(p, self.mode, &mut self.rng)
    }

    fn norm(
        &mut self,
        x: Var<'t>,
        site: &str,
        lengths: &[usize],
    ) -> Result<Var<'t>> {
        let gamma = self.var(&format!("{site}.gamma"));
        let beta = self.var(&format!("{site}.beta"));
        match self.model.config.norm_kind {
            NormKind::Layer => x.layernorm(gamma, beta),
            NormKind::Batch => {
                let state = self.model.bn.get_mut(site).expect("bn state");
                x.batchnorm_timewise(lengths, gamma, beta, state, self.mode)
            }
        }
    }

    /// Project, inject positions, and run the encoder blocks. Returns final
    /// representations [B, w', d] along with the projected lengths.
    pub fn encode(&mut self, x: &Tensor, lengths: &[usize]) -> Result<(Var<'t>, Vec<usize>)> {
        let cfg = self.model.config.clone();
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[1] != cfg.w || shape[2] != cfg.m {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![cfg.w, cfg.m],
            });
        }
        let bsz = shape[0];
        if lengths.len() != bsz {
            return Err(Error::InvalidArgument(format!(
                "{} lengths for batch of {bsz}",
                lengths.len()
            )));
        }
        // Zero the padded region so the pad fill value can never influence
        // real positions (convolutional projection reads across time).
        let mut data = x.data().to_vec();
        for (b, &len) in lengths.iter().enumerate() {
            if len == 0 || len > cfg.w {
                return Err(Error::InvalidArgument(format!(
                    "sample length {len} outside 1..={}",
                    cfg.w
                )));
            }
            for t in len..cfg.w {
                for i in 0..cfg.m {
                    data[(b * cfg.w + t) * cfg.m + i] = 0.0;
                }
            }
        }
        let input = self.tape.constant(Tensor::new(shape, data));

        let (mut h, lengths) = match cfg.input_projection {
            InputProjection::Linear => {
                let u = self.embed_linear(input, bsz)?;
                (u, lengths.to_vec())
            }
            InputProjection::Conv1d { kernel, stride, dilation } => {
                let u = input
                    .conv1d_time(self.var("embed.k"), stride, dilation, stride == 1)?
                    .add_broadcast(self.var("embed.b"))?;
                let span = dilation * (kernel - 1) + 1;
                let out_len = |l: usize| {
                    if stride == 1 {
                        l
                    } else {
                        // valid convolution; every sample must cover the span
                        (l.max(span) - span) / stride + 1
                    }
                };
                (u, lengths.iter().map(|&l| out_len(l).max(1)).collect())
            }
        };
        let w_eff = h.shape()[1];
        let d = cfg.d_model;

        h = self.add_positional(h)?;
        h = self.dropout(h)?;

        let bias = build_padding_mask(&lengths, w_eff)?;
        let scale = 1.0 / ((d / cfg.n_heads) as f64).sqrt();
        for i in 0..cfg.n_blocks {
            let attn = self.attention(h, &bias, scale, i)?;
            let attn = self.dropout(attn)?;
            h = self.norm(h.add(attn)?, &format!("block{i}.norm1"), &lengths)?;
            let ff = self.feed_forward(h, i)?;
            let ff = self.dropout(ff)?;
            h = self.norm(h.add(ff)?, &format!("block{i}.norm2"), &lengths)?;
        }
        Ok((h, lengths))
    }

    fn embed_linear(&self, x: Var<'t>, bsz: usize) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let flat = x.reshape(vec![bsz * cfg.w, cfg.m])?;
        flat.matmul_ex(self.var("embed.w"), false, true)?
            .add_broadcast(self.var("embed.b"))?
            .reshape(vec![bsz, cfg.w, cfg.d_model])
    }

    fn add_positional(&self, u: Var<'t>) -> Result<Var<'t>> {
        let shape = u.shape();
        let (w, d) = (shape[1], shape[2]);
        let pos = match self.model.config.pos_encoding {
            PosEncoding::Learnable => self.var("pos.w"),
            PosEncoding::Sinusoidal => self.tape.constant(sinusoidal_encoding(w, d)),
        };
        if pos.shape() != [w, d] {
            return Err(Error::ShapeMismatch {
                op: "add_positional",
                left: shape,
                right: pos.shape(),
            });
        }
        u.add_broadcast(pos)
    }

    fn attention(&mut self, h: Var<'t>, bias: &Tensor, scale: f64, block: usize) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let (heads, d) = (cfg.n_heads, cfg.d_model);
        let dh = d / heads;
        let shape = h.shape();
        let (bsz, w) = (shape[0], shape[1]);
        let flat = h.reshape(vec![bsz * w, d])?;
        let project = |part: &str| -> Result<Var<'t>> {
            let p = flat
                .matmul(self.var(&format!("block{block}.attn.w{part}")))?
                .add_broadcast(self.var(&format!("block{block}.attn.b{part}")))?;
            // [B, w, H, dh] -> [B, H, w, dh] -> [B*H, w, dh]
            p.reshape(vec![bsz, w, heads, dh])?
                .permute(&[0, 2, 1, 3])
                .reshape(vec![bsz * heads, w, dh])
        };
        let q = project("q")?;
        let k = project("k")?;
        let v = project("v")?;
        let scores = q.matmul_batched_ex(k, false, true)?.scale(scale);
        let weights = scores.add_attention_bias(bias, heads)?.softmax_last_dim()?;
        let weights = self.dropout(weights)?;
        let ctx = weights.matmul_batched_ex(v, false, false)?;
        let merged = ctx
            .reshape(vec![bsz, heads, w, dh])?
            .permute(&[0, 2, 1, 3])
            .reshape(vec![bsz * w, d])?;
        merged
            .matmul(self.var(&format!("block{block}.attn.wo")))?
            .add_broadcast(self.var(&format!("block{block}.attn.bo")))?
            .reshape(vec![bsz, w, d])
    }

    fn feed_forward(&mut self, h: Var<'t>, block: usize) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let shape = h.shape();
        let (bsz, w) = (shape[0], shape[1]);
        let flat = h.reshape(vec![bsz * w, cfg.d_model])?;
        flat.matmul(self.var(&format!("block{block}.ff.w1")))?
            .add_broadcast(self.var(&format!("block{block}.ff.b1")))?
            .gelu()
            .matmul(self.var(&format!("block{block}.ff.w2")))?
            .add_broadcast(self.var(&format!("block{block}.ff.b2")))?
            .reshape(vec![bsz, w, cfg.d_model])
    }

    /// Per-time-step linear map back to the input space.
    pub fn head_reconstruct(&self, z: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        if cfg.head != Head::Reconstruction {
            return Err(Error::InvalidArgument(format!(
                "head_reconstruct called with head {:?}",
                cfg.head
            )));
        }
        let shape = z.shape();
        let (bsz, w) = (shape[0], shape[1]);
        z.reshape(vec![bsz * w, cfg.d_model])?
            .matmul(self.var("head.w"))?
            .add_broadcast(self.var("head.b"))?
            .reshape(vec![bsz, w, cfg.m])
    }

    /// Concatenate all time-step representations (padded positions zeroed)
    /// and apply the output linear map. Classification logits are raw.
    pub fn head_predict(&self, z: Var<'t>, lengths: &[usize]) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let n = match cfg.head {
            Head::Regression(n) | Head::Classification(n) => n,
            Head::Reconstruction => {
                return Err(Error::InvalidArgument(
                    "head_predict called with reconstruction head".into(),
                ))
            }
        };
        let shape = z.shape();
        let (bsz, w, d) = (shape[0], shape[1], shape[2]);
        let mut keep = vec![0.0; bsz * w * d];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(w) {
                for j in 0..d {
                    keep[(b * w + t) * d + j] = 1.0;
                }
            }
        }
        let mask = self.tape.constant(Tensor::new(vec![bsz, w, d], keep));
        let zbar = z.mul(mask)?.reshape(vec![bsz, w * d])?;
        let head_w = self.var("head.w");
        if head_w.shape()[0] != w * d {
            return Err(Error::ShapeMismatch {
                op: "head_predict",
                left: vec![w * d],
                right: head_w.shape(),
            });
        }
        let _ = n;
        zbar.matmul(head_w)?.add_broadcast(self.var("head.b"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(head: Head) -> ModelConfig {
        ModelConfig {
            m: 2,
            w: 5,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 16,
            dropout_p: 0.0,
            activation: "gelu".into(),
            norm_kind: NormKind::Batch,
            pos_encoding: PosEncoding::Learnable,
            input_projection: InputProjection::Linear,
            head,
        }
    }

    fn rng() -> ChaCha8Rng {
        derive(11, &[0])
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(Head::Reconstruction);
        cfg.n_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        cfg = small_config(Head::Reconstruction);
        cfg.activation = "relu".into();
        assert!(cfg.validate().is_err());
        assert!(small_config(Head::Classification(3)).validate().is_ok());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for head in [Head::Reconstruction, Head::Regression(1), Head::Classification(9)] {
            let cfg = small_config(head);
            let model = TSTModel::init(cfg.clone(), 1).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(), "{head:?}");
        }
        // closed forms from the construction: linear projection d*m + d etc.
        let cfg = small_config(Head::Classification(9));
        let model = TSTModel::init(cfg.clone(), 1).unwrap();
        assert_eq!(
            model.params["embed.w"].numel() + model.params["embed.b"].numel(),
            cfg.d_model * cfg.m + cfg.d_model
        );
        assert_eq!(
            model.params["head.w"].numel() + model.params["head.b"].numel(),
            9 * (cfg.d_model * cfg.w) + 9
        );
        let recon = TSTModel::init(small_config(Head::Reconstruction), 1).unwrap();
        assert_eq!(
            recon.params["head.w"].numel() + recon.params["head.b"].numel(),
            cfg.m * cfg.d_model + cfg.m
        );
        assert_eq!(model.params["pos.w"].shape(), &[cfg.w, cfg.d_model]);
    }

    #[test]
    fn padding_mask_values() {
        let bias = build_padding_mask(&[1, 3], 3).unwrap();
        assert_eq!(bias.data(), &[0.0, -1e9, -1e9, 0.0, 0.0, 0.0]);
        assert!(build_padding_mask(&[0], 3).is_err());
        assert!(build_padding_mask(&[4], 3).is_err());
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let mut model = TSTModel::init(small_config(Head::Classification(3)), 7).unwrap();
        let x = Tensor::uniform(vec![2, 5, 2], 1.0, &mut rng());
        let lengths = [5, 3];
        let run = |model: &mut TSTModel| {
            let tape = Tape::new();
            let mut fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
            let (z, lens) = fwd.encode(&x, &lengths).unwrap();
            let y = fwd.head_predict(z, &lens).unwrap();
            y.value().data().to_vec()
        };
        let a = run(&mut model);
        let b = run(&mut model);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b, "eval forward must be a pure function");
    }

    #[test]
    fn attention_ignores_padded_keys() {
        // With length 2 of w=4, total softmax mass on padded keys < 1e-9.
        let tape = Tape::new();
        let scores = tape.constant(Tensor::zeros(vec![2, 4, 4])); // B=1, heads=2
        let bias = build_padding_mask(&[2], 4).unwrap();
        let weights = scores
            .add_attention_bias(&bias, 2)
            .unwrap()
            .softmax_last_dim()
            .unwrap();
        let v = weights.value();
        for row in 0..8 {
            let r = &v.data()[row * 4..(row + 1) * 4];
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r[2] + r[3] < 1e-9, "padded keys got weight {:?}", r);
        }
    }

    #[test]
    fn embed_linear_identity_case() {
        let mut cfg = small_config(Head::Reconstruction);
        cfg.d_model = 2; // = m, so identity W_p passes input through
        cfg.n_heads = 1;
        let mut model = TSTModel::init(cfg, 1).unwrap();
        model.params.insert("embed.w".into(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = Tensor::uniform(vec![1, 5, 2], 1.0, &mut rng());
        let tape = Tape::new();
        let fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
        let u = fwd.embed_linear(tape.constant(x.clone()), 1).unwrap();
        assert_eq!(u.value().data(), x.data());
    }

    #[test]
    fn conv_projection_matches_linear_for_k1() {
        let mut cfg = small_config(Head::Reconstruction);
        cfg.input_projection = InputProjection::Conv1d { kernel: 1, stride: 1, dilation: 1 };
        let mut conv_model = TSTModel::init(cfg.clone(), 3).unwrap();
        let mut lin_model = TSTModel::init(small_config(Head::Reconstruction), 3).unwrap();
        // kernel [d,1,m] with the same values as W_p [d,m]
        let wp = lin_model.params["embed.w"].clone();
        conv_model
            .params
            .insert("embed.k".into(), wp.clone().reshaped(vec![8, 1, 2]).unwrap());
        let x = Tensor::uniform(vec![2, 5, 2], 1.0, &mut rng());
        let lengths = [5, 5];
        let tape = Tape::new();
        let mut f1 = conv_model.forward(&tape, Mode::Eval, rng(), Trainable::None);
        let (z1, _) = f1.encode(&x, &lengths).unwrap();
        let tape2 = Tape::new();
        let mut f2 = lin_model.forward(&tape2, Mode::Eval, rng(), Trainable::None);
        let (z2, _) = f2.encode(&x, &lengths).unwrap();
        for (a, b) in z1.value().data().iter().zip(z2.value().data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn strided_conv_halves_width() {
        let mut cfg = small_config(Head::Regression(1));
        cfg.w = 6;
        cfg.input_projection = InputProjection::Conv1d { kernel: 2, stride: 2, dilation: 1 };
        assert_eq!(cfg.proj_width(), 3);
        let mut model = TSTModel::init(cfg, 1).unwrap();
        let x = Tensor::uniform(vec![1, 6, 2], 1.0, &mut rng());
        let tape = Tape::new();
        let mut fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
        let (z, lens) = fwd.encode(&x, &[6]).unwrap();
        assert_eq!(z.shape(), vec![1, 3, 8]);
        assert_eq!(lens, vec![3]);
        let y = fwd.head_predict(z, &lens).unwrap();
        assert_eq!(y.shape(), vec![1, 1]);
    }

    #[test]
    fn padding_invariance_in_eval_mode() {
        // Same real data, different padding amounts and fill values: real
        // positions of the output must agree to < 1e-6.
        let cfg = small_config(Head::Reconstruction);
        let mut model = TSTModel::init(cfg, 21).unwrap();
        let mut base = Tensor::uniform(vec![1, 5, 2], 1.0, &mut rng());
        // vary the fill beyond length 3
        for t in 3..5 {
            for i in 0..2 {
                base.data_mut()[t * 2 + i] = 99.0;
            }
        }
        let mut alt = base.clone();
        for t in 3..5 {
            for i in 0..2 {
                alt.data_mut()[t * 2 + i] = -7.0;
            }
        }
        let run = |model: &mut TSTModel, x: &Tensor| {
            let tape = Tape::new();
            let mut fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
            let (z, _) = fwd.encode(x, &[3]).unwrap();
            let y = fwd.head_reconstruct(z).unwrap();
            y.value().data().to_vec()
        };
        let a = run(&mut model, &base);
        let b = run(&mut model, &alt);
        for t in 0..3 {
            for i in 0..2 {
                assert!((a[t * 2 + i] - b[t * 2 + i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_predict_hand_case() {
        // w=2, d=1 effective head: y = z_1 + z_2 when W_o = [1,1]
        let mut cfg = small_config(Head::Regression(1));
        cfg.d_model = 1;
        cfg.n_heads = 1;
        cfg.w = 2;
        let mut model = TSTModel::init(cfg, 1).unwrap();
        model.params.insert("head.w".into(), Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let tape = Tape::new();
        let fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
        let z = tape.constant(Tensor::new(vec![1, 2, 1], vec![3.0, 4.0]));
        let y = fwd.head_predict(z, &[2]).unwrap();
        assert_eq!(y.value().data(), &[7.0]);
        // heads reject the wrong task
        assert!(fwd.head_reconstruct(z).is_err());
    }

    #[test]
    fn norm_kind_changes_nothing_but_norm_params() {
        let batch = TSTModel::init(small_config(Head::Regression(1)), 1).unwrap();
        let mut cfg = small_config(Head::Regression(1));
        cfg.norm_kind = NormKind::Layer;
        let layer = TSTModel::init(cfg, 1).unwrap();
        let keys_a: Vec<&String> = batch.params.keys().collect();
        let keys_b: Vec<&String> = layer.params.keys().collect();
        assert_eq!(keys_a, keys_b);
        assert_eq!(batch.param_count(), layer.param_count());
        assert!(layer.bn.is_empty());
        assert_eq!(batch.bn.len(), 2 * 2);
    }

    #[test]
    fn positional_encoding_gets_gradient() {
        let mut model = TSTModel::init(small_config(Head::Regression(1)), 5).unwrap();
        let x = Tensor::uniform(vec![2, 5, 2], 1.0, &mut rng());
        let tape = Tape::new();
        let mut fwd = model.forward(&tape, Mode::Train, rng(), Trainable::All);
        let (z, lens) = fwd.encode(&x, &[5, 4]).unwrap();
        let y = fwd.head_predict(z, &lens).unwrap();
        let pos = fwd.vars["pos.w"];
        tape.backward(y.sum_all()).unwrap();
        let g = tape.grad(pos).expect("positional gradient");
        assert!(g.data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn sinusoidal_encoding_available() {
        let mut cfg = small_config(Head::Regression(1));
        cfg.pos_encoding = PosEncoding::Sinusoidal;
        let mut model = TSTModel::init(cfg.clone(), 1).unwrap();
        assert!(!model.params.contains_key("pos.w"));
        assert_eq!(model.param_count(), cfg.param_count());
        let x = Tensor::uniform(vec![1, 5, 2], 1.0, &mut rng());
        let tape = Tape::new();
        let mut fwd = model.forward(&tape, Mode::Eval, rng(), Trainable::None);
        let (z, _) = fwd.encode(&x, &[5]).unwrap();
        assert!(z.value().all_finite());
    }
}
