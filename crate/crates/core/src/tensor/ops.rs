//! Differentiable operations. Each op computes its forward value eagerly and
//! records vector-Jacobian closures on the tape for the reverse sweep.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Var, Vjp};
use crate::tensor::{gemm, Tensor};

/// Forward-pass mode. Train mode applies dropout and updates batch-norm
/// running statistics; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics, one pair per normalized feature.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
/// Scores at or below this are treated as masked-out by the padding bias.
const MASKED_SCORE_FLOOR: f64 = -1e8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unop(self, value: Tensor, vjp: Vjp) -> Var<'t> {
        self.tape.push(value, vec![(self.id, vjp)])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        Ok(self.tape.push(
            value,
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (other.id, Box::new(|g: &Tensor| g.clone())),
            ],
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        Ok(self.tape.push(
            value,
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (other.id, Box::new(|g: &Tensor| g.map(|x| -x))),
            ],
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(bc.data()).map(|(g, y)| g * y).collect(),
                        )
                    }),
                ),
                (
                    other.id,
                    Box::new(move |g: &Tensor| {
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(ac.data()).map(|(g, x)| g * x).collect(),
                        )
                    }),
                ),
            ],
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        self.unop(a.map(|x| x * c), Box::new(move |g: &Tensor| g.map(|x| x * c)))
    }

    /// Add `other` broadcast over the leading dimensions of `self`;
    /// `other.shape` must be a suffix of `self.shape`.
    pub fn add_broadcast(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Error::ShapeMismatch { op: "add_broadcast", left: ash, right: bsh });
        }
        let bn = b.numel().max(1);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % bn])
            .collect();
        let value = Tensor::new(ash, data);
        Ok(self.tape.push(
            value,
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (
                    other.id,
                    Box::new(move |g: &Tensor| {
                        let mut out = vec![0.0; bn];
                        for (i, x) in g.data().iter().enumerate() {
                            out[i % bn] += x;
                        }
                        Tensor::new(bsh.clone(), out)
                    }),
                ),
            ],
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let a = self.value();
        let old = a.shape().to_vec();
        let value = a.as_ref().clone().reshaped(shape)?;
        Ok(self.unop(
            value,
            Box::new(move |g: &Tensor| g.clone().reshaped(old.clone()).expect("reshape vjp")),
        ))
    }

    /// Materialized axis permutation.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let a = self.value();
        let value = permute_tensor(&a, axes);
        let inverse: Vec<usize> = {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            inv
        };
        self.unop(value, Box::new(move |g: &Tensor| permute_tensor(g, &inverse)))
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let total: f64 = a.data().iter().sum();
        self.unop(
            Tensor::scalar(total),
            Box::new(move |g: &Tensor| Tensor::full(shape.clone(), g.item())),
        )
    }

    /// Matrix product with optional transposes: op_a(self) * op_b(other).
    pub fn matmul_ex(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (p, qa) = op_dims(a.shape(), ta);
        let (qb, r) = op_dims(b.shape(), tb);
        if qa != qb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; p * r];
        gemm_op(ta, tb, p, qa, r, a.data(), b.data(), &mut c);
        let value = Tensor::new(vec![p, r], c);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let q = qa;
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut da = vec![0.0; ash.iter().product()];
                        if !ta {
                            // dA = dC * op_b(B)^T
                            gemm_op(false, !tb, p, r, q, g.data(), bc.data(), &mut da);
                        } else {
                            // dA = op_b(B) * dC^T
                            gemm_op(tb, true, q, r, p, bc.data(), g.data(), &mut da);
                        }
                        Tensor::new(ash.clone(), da)
                    }),
                ),
                (
                    other.id,
                    Box::new(move |g: &Tensor| {
                        let mut db = vec![0.0; bsh.iter().product()];
                        if !tb {
                            // dB = op_a(A)^T * dC
                            gemm_op(!ta, false, q, p, r, ac.data(), g.data(), &mut db);
                        } else {
                            // dB = dC^T * op_a(A)
                            gemm_op(true, ta, r, p, q, g.data(), ac.data(), &mut db);
                        }
                        Tensor::new(bsh.clone(), db)
                    }),
                ),
            ],
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, false)
    }

    /// Batched matrix product over the leading dimension:
    /// [N,p,q] x [N,q,r] -> [N,p,r], with optional transpose of each operand's
    /// trailing two axes.
    pub fn matmul_batched_ex(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul_batched",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let n = a.shape()[0];
        let (p, qa) = op_dims(&a.shape()[1..], ta);
        let (qb, r) = op_dims(&b.shape()[1..], tb);
        if qa != qb {
            return Err(Error::ShapeMismatch {
                op: "matmul_batched",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let q = qa;
        let mut c = vec![0.0; n * p * r];
        for i in 0..n {
            gemm_op(
                ta,
                tb,
                p,
                q,
                r,
                &a.data()[i * p * q..(i + 1) * p * q],
                &b.data()[i * q * r..(i + 1) * q * r],
                &mut c[i * p * r..(i + 1) * p * r],
            );
        }
        let value = Tensor::new(vec![n, p, r], c);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut da = vec![0.0; n * p * q];
                        for i in 0..n {
                            let gi = &g.data()[i * p * r..(i + 1) * p * r];
                            let bi = &bc.data()[i * q * r..(i + 1) * q * r];
                            let di = &mut da[i * p * q..(i + 1) * p * q];
                            if !ta {
                                gemm_op(false, !tb, p, r, q, gi, bi, di);
                            } else {
                                gemm_op(tb, true, q, r, p, bi, gi, di);
                            }
                        }
                        Tensor::new(ash.clone(), da)
                    }),
                ),
                (
                    other.id,
                    Box::new(move |g: &Tensor| {
                        let mut db = vec![0.0; n * q * r];
                        for i in 0..n {
                            let gi = &g.data()[i * p * r..(i + 1) * p * r];
                            let ai = &ac.data()[i * p * q..(i + 1) * p * q];
                            let di = &mut db[i * q * r..(i + 1) * q * r];
                            if !tb {
                                gemm_op(!ta, false, q, p, r, ai, gi, di);
                            } else {
                                gemm_op(true, ta, r, p, q, gi, ai, di);
                            }
                        }
                        Tensor::new(bsh.clone(), db)
                    }),
                ),
            ],
        ))
    }

    /// GELU, tanh approximation:
    /// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let value = a.map(gelu_fwd);
        let ac = Rc::clone(&a);
        self.unop(
            value,
            Box::new(move |g: &Tensor| {
                Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ac.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect(),
                )
            }),
        )
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_last_dim(self) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let k = *shape.last().ok_or(Error::InvalidArgument(
            "softmax on 0-d tensor".into(),
        ))?;
        if k == 0 {
            return Err(Error::InvalidArgument("softmax over empty dimension".into()));
        }
        let mut out = vec![0.0; a.numel()];
        for (row_in, row_out) in a.data().chunks(k).zip(out.chunks_mut(k)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= MASKED_SCORE_FLOOR {
                return Err(Error::FullyMaskedRow);
            }
            let mut sum = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(shape, out);
        let saved = Rc::new(value.clone());
        Ok(self.unop(
            value,
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; g.numel()];
                for ((grow, yrow), drow) in g
                    .data()
                    .chunks(k)
                    .zip(saved.data().chunks(k))
                    .zip(dx.chunks_mut(k))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = (g - dot) * y;
                    }
                }
                Tensor::new(g.shape().to_vec(), dx)
            }),
        ))
    }

    /// Inverted dropout: train mode zeroes elements with probability `p` and
    /// scales survivors by 1/(1-p); eval mode is the identity.
    pub fn dropout(self, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            let a = self.value();
            return Ok(self.unop(a.as_ref().clone(), Box::new(|g: &Tensor| g.clone())));
        }
        let a = self.value();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Rc<Vec<f64>> = Rc::new(
            (0..a.numel())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
                .collect(),
        );
        let data = a.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        Ok(self.unop(
            value,
            Box::new(move |g: &Tensor| {
                Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
                )
            }),
        ))
    }

    /// Per-position normalization over the last (feature) dimension.
    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let d = *shape
            .last()
            .ok_or(Error::InvalidArgument("layernorm on 0-d tensor".into()))?;
        if d == 0 {
            return Err(Error::InvalidArgument("layernorm over empty dimension".into()));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                left: shape,
                right: gv.shape().to_vec(),
            });
        }
        let rows = a.numel() / d;
        let mut xhat = vec![0.0; a.numel()];
        let mut inv_sigma = vec![0.0; rows];
        let mut clamped = vec![false; rows];
        let mut out = vec![0.0; a.numel()];
        for row in 0..rows {
            let x = &a.data()[row * d..(row + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            clamped[row] = var < LN_EPS;
            let sigma = var.max(LN_EPS).sqrt();
            inv_sigma[row] = 1.0 / sigma;
            for j in 0..d {
                let h = (x[j] - mean) / sigma;
                xhat[row * d + j] = h;
                out[row * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out);
        let xhat = Rc::new(xhat);
        let inv_sigma = Rc::new(inv_sigma);
        let clamped = Rc::new(clamped);
        let gvc = Rc::clone(&gv);
        let (xh_x, is_x, cl_x) = (Rc::clone(&xhat), Rc::clone(&inv_sigma), Rc::clone(&clamped));
        let xh_g = Rc::clone(&xhat);
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut dx = vec![0.0; g.numel()];
                        for row in 0..rows {
                            let gr = &g.data()[row * d..(row + 1) * d];
                            let xh = &xh_x[row * d..(row + 1) * d];
                            let mut mean_gg = 0.0;
                            let mut mean_ggx = 0.0;
                            for j in 0..d {
                                let gg = gr[j] * gvc.data()[j];
                                mean_gg += gg;
                                mean_ggx += gg * xh[j];
                            }
                            mean_gg /= d as f64;
                            mean_ggx /= d as f64;
                            for j in 0..d {
                                let gg = gr[j] * gvc.data()[j];
                                let var_term = if cl_x[row] { 0.0 } else { xh[j] * mean_ggx };
                                dx[row * d + j] = is_x[row] * (gg - mean_gg - var_term);
                            }
                        }
                        Tensor::new(g.shape().to_vec(), dx)
                    }),
                ),
                (
                    gamma.id,
                    Box::new(move |g: &Tensor| {
                        let mut dg = vec![0.0; d];
                        for (i, gv) in g.data().iter().enumerate() {
                            dg[i % d] += gv * xh_g[i];
                        }
                        Tensor::new(vec![d], dg)
                    }),
                ),
                (
                    beta.id,
                    Box::new(move |g: &Tensor| {
                        let mut db = vec![0.0; d];
                        for (i, gv) in g.data().iter().enumerate() {
                            db[i % d] += gv;
                        }
                        Tensor::new(vec![d], db)
                    }),
                ),
            ],
        ))
    }

    /// Batch normalization over all non-padded (batch, time) positions of a
    /// [B, w, d] tensor. Train mode computes batch statistics over valid
    /// positions only and updates `state`; eval mode applies running stats.
    pub fn batchnorm_timewise(
        self,
        lengths: &[usize],
        gamma: Var<'t>,
        beta: Var<'t>,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_timewise",
                left: shape,
                right: vec![],
            });
        }
        let (bsz, w, d) = (shape[0], shape[1], shape[2]);
        if lengths.len() != bsz {
            return Err(Error::InvalidArgument(format!(
                "batchnorm: {} lengths for batch of {bsz}",
                lengths.len()
            )));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > w) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm: pad length {l} exceeds sequence length {w}"
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_timewise",
                left: vec![d],
                right: gv.shape().to_vec(),
            });
        }
        let n_valid: usize = lengths.iter().sum();
        if n_valid == 0 {
            return Err(Error::InvalidArgument(
                "batchnorm: zero non-padded positions".into(),
            ));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for (b, &len) in lengths.iter().enumerate() {
                    for t in 0..len {
                        let base = (b * w + t) * d;
                        for (j, m) in mean.iter_mut().enumerate() {
                            *m += a.data()[base + j];
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n_valid as f64;
                }
                for (b, &len) in lengths.iter().enumerate() {
                    for t in 0..len {
                        let base = (b * w + t) * d;
                        for (j, v) in var.iter_mut().enumerate() {
                            let dx = a.data()[base + j] - mean[j];
                            *v += dx * dx;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= n_valid as f64;
                }
                // Unbiased variance for the running estimate.
                let bessel = if n_valid > 1 {
                    n_valid as f64 / (n_valid - 1) as f64
                } else {
                    1.0
                };
                for j in 0..d {
                    state.running_mean[j] =
                        (1.0 - BN_MOMENTUM) * state.running_mean[j] + BN_MOMENTUM * mean[j];
                    state.running_var[j] =
                        (1.0 - BN_MOMENTUM) * state.running_var[j] + BN_MOMENTUM * var[j] * bessel;
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        let inv_sigma: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(BN_EPS).sqrt()).collect();
        let clamped: Vec<bool> = var.iter().map(|&v| v < BN_EPS).collect();

        let mut xhat = vec![0.0; a.numel()];
        let mut out = vec![0.0; a.numel()];
        for (i, &x) in a.data().iter().enumerate() {
            let j = i % d;
            let h = (x - mean[j]) * inv_sigma[j];
            xhat[i] = h;
            out[i] = gv.data()[j] * h + bv.data()[j];
        }
        let value = Tensor::new(shape.clone(), out);

        let xhat = Rc::new(xhat);
        let inv_sigma = Rc::new(inv_sigma);
        let train_stats = mode == Mode::Train;
        let lengths_v: Rc<Vec<usize>> = Rc::new(lengths.to_vec());
        let gvc = Rc::clone(&gv);
        let (xh_x, is_x) = (Rc::clone(&xhat), Rc::clone(&inv_sigma));
        let xh_g = Rc::clone(&xhat);
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut dx = vec![0.0; g.numel()];
                        // grad wrt xhat, flattened
                        let gg =
                            |i: usize| -> f64 { g.data()[i] * gvc.data()[i % d] };
                        if !train_stats {
                            for (i, slot) in dx.iter_mut().enumerate() {
                                *slot = gg(i) * is_x[i % d];
                            }
                            return Tensor::new(g.shape().to_vec(), dx);
                        }
                        // Batch statistics were used: every output position
                        // (padded included) depends on mean/var, so stat
                        // gradients sum over all positions, while only valid
                        // positions receive the redistribution terms.
                        let mut sum_gg = vec![0.0; d];
                        let mut sum_ggx = vec![0.0; d];
                        for i in 0..g.numel() {
                            let j = i % d;
                            let v = gg(i);
                            sum_gg[j] += v;
                            sum_ggx[j] += v * xh_x[i];
                        }
                        for (i, slot) in dx.iter_mut().enumerate() {
                            *slot = gg(i) * is_x[i % d];
                        }
                        let nvf = n_valid as f64;
                        for (b, &len) in lengths_v.iter().enumerate() {
                            for t in 0..len {
                                let base = (b * w + t) * d;
                                for j in 0..d {
                                    let i = base + j;
                                    let mean_term = sum_gg[j] * is_x[j] / nvf;
                                    let var_term = if clamped[j] {
                                        0.0
                                    } else {
                                        xh_x[i] * sum_ggx[j] * is_x[j] / nvf
                                    };
                                    dx[i] -= mean_term + var_term;
                                }
                            }
                        }
                        Tensor::new(g.shape().to_vec(), dx)
                    }),
                ),
                (
                    gamma.id,
                    Box::new(move |g: &Tensor| {
                        let mut dg = vec![0.0; d];
                        for (i, gv) in g.data().iter().enumerate() {
                            dg[i % d] += gv * xh_g[i];
                        }
                        Tensor::new(vec![d], dg)
                    }),
                ),
                (
                    beta.id,
                    Box::new(move |g: &Tensor| {
                        let mut db = vec![0.0; d];
                        for (i, gv) in g.data().iter().enumerate() {
                            db[i % d] += gv;
                        }
                        Tensor::new(vec![d], db)
                    }),
                ),
            ],
        ))
    }

    /// Add a per-(batch, key) attention bias to scores shaped
    /// [B*heads, w, w]. The bias is a constant (no gradient path).
    pub fn add_attention_bias(self, bias: &Tensor, heads: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if shape.len() != 3 || bias.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "add_attention_bias",
                left: shape,
                right: bias.shape().to_vec(),
            });
        }
        let (n, wq, wk) = (shape[0], shape[1], shape[2]);
        let (bsz, w) = (bias.shape()[0], bias.shape()[1]);
        if n != bsz * heads || wk != w {
            return Err(Error::ShapeMismatch {
                op: "add_attention_bias",
                left: shape,
                right: bias.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; a.numel()];
        for i in 0..n {
            let b = i / heads;
            for qpos in 0..wq {
                let base = (i * wq + qpos) * wk;
                for kpos in 0..wk {
                    out[base + kpos] = a.data()[base + kpos] + bias.data()[b * w + kpos];
                }
            }
        }
        Ok(self.unop(Tensor::new(shape, out), Box::new(|g: &Tensor| g.clone())))
    }

    /// Mean cross-entropy of softmax(logits) against integer class labels.
    /// Computed with the log-sum-exp trick; softmax lives inside the loss.
    pub fn cross_entropy_mean(self, labels: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: logits {:?} vs {} labels",
                shape,
                labels.len()
            )));
        }
        let (bsz, c) = (shape[0], shape[1]);
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {l} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; bsz * c];
        for (b, &label) in labels.iter().enumerate() {
            let row = &a.data()[b * c..(b + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[b * c + j] = e;
                sum += e;
            }
            for p in &mut probs[b * c..(b + 1) * c] {
                *p /= sum;
            }
            total += sum.ln() + max - row[label];
        }
        let value = Tensor::scalar(total / bsz as f64);
        let probs = Rc::new(probs);
        let labels: Rc<Vec<usize>> = Rc::new(labels.to_vec());
        Ok(self.unop(
            value,
            Box::new(move |g: &Tensor| {
                let scale = g.item() / bsz as f64;
                let mut dx = vec![0.0; bsz * c];
                for b in 0..bsz {
                    for j in 0..c {
                        let onehot = if labels[b] == j { 1.0 } else { 0.0 };
                        dx[b * c + j] = scale * (probs[b * c + j] - onehot);
                    }
                }
                Tensor::new(vec![bsz, c], dx)
            }),
        ))
    }

    /// 1D convolution over time for a [B, w, m] input with kernels [d, k, m].
    /// `same` pads symmetrically so that stride=1 preserves length; otherwise
    /// only fully valid positions are produced.
    pub fn conv1d_time(
        self,
        kernels: Var<'t>,
        stride: usize,
        dilation: usize,
        same_padding: bool,
    ) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernels.value());
        if x.shape().len() != 3 || k.shape().len() != 3 || x.shape()[2] != k.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_time",
                left: x.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("conv1d: stride and dilation must be >= 1".into()));
        }
        let (bsz, w, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (d, kw, _) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let span = dilation * (kw - 1) + 1;
        let pad_total = if same_padding { span - 1 } else { 0 };
        if w + pad_total < span {
            return Err(Error::InvalidArgument(format!(
                "conv1d: kernel span {span} wider than padded input length {}",
                w + pad_total
            )));
        }
        let pad_left = pad_total / 2;
        let w_out = (w + pad_total - span) / stride + 1;
        let mut out = vec![0.0; bsz * w_out * d];
        for b in 0..bsz {
            for t in 0..w_out {
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..kw {
                        let src = (t * stride + j * dilation) as isize - pad_left as isize;
                        if src < 0 || src >= w as isize {
                            continue;
                        }
                        let xb = (b * w + src as usize) * m;
                        let kb = (i * kw + j) * m;
                        for h in 0..m {
                            acc += x.data()[xb + h] * k.data()[kb + h];
                        }
                    }
                    out[(b * w_out + t) * d + i] = acc;
                }
            }
        }
        let value = Tensor::new(vec![bsz, w_out, d], out);
        let (xc, kc) = (Rc::clone(&x), Rc::clone(&k));
        Ok(self.tape.push(
            value,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut dx = vec![0.0; bsz * w * m];
                        for b in 0..bsz {
                            for t in 0..w_out {
                                for i in 0..d {
                                    let go = g.data()[(b * w_out + t) * d + i];
                                    for j in 0..kw {
                                        let src = (t * stride + j * dilation) as isize
                                            - pad_left as isize;
                                        if src < 0 || src >= w as isize {
                                            continue;
                                        }
                                        let xb = (b * w + src as usize) * m;
                                        let kb = (i * kw + j) * m;
                                        for h in 0..m {
                                            dx[xb + h] += go * kc.data()[kb + h];
                                        }
                                    }
                                }
                            }
                        }
                        Tensor::new(vec![bsz, w, m], dx)
                    }),
                ),
                (
                    kernels.id,
                    Box::new(move |g: &Tensor| {
                        let mut dk = vec![0.0; d * kw * m];
                        for b in 0..bsz {
                            for t in 0..w_out {
                                for i in 0..d {
                                    let go = g.data()[(b * w_out + t) * d + i];
                                    for j in 0..kw {
                                        let src = (t * stride + j * dilation) as isize
                                            - pad_left as isize;
                                        if src < 0 || src >= w as isize {
                                            continue;
                                        }
                                        let xb = (b * w + src as usize) * m;
                                        let kb = (i * kw + j) * m;
                                        for h in 0..m {
                                            dk[kb + h] += go * xc.data()[xb + h];
                                        }
                                    }
                                }
                            }
                        }
                        Tensor::new(vec![d, kw, m], dk)
                    }),
                ),
            ],
        ))
    }
}

fn op_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    if transposed {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

fn gemm_op(ta: bool, tb: bool, p: usize, q: usize, r: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(ta, tb, p, q, r, a, b, c, 0.0);
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn permute_tensor(a: &Tensor, axes: &[usize]) -> Tensor {
    let shape = a.shape();
    assert_eq!(axes.len(), shape.len(), "permute axes rank mismatch");
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut out = vec![0.0; a.numel()];
    let mut idx = vec![0usize; nd];
    for &v in a.data() {
        let mut off = 0;
        for (i, &ax) in axes.iter().enumerate() {
            off += idx[ax] * out_strides[i];
        }
        out[off] = v;
        for i in (0..nd).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
