//! Finite-difference validation of every differentiable operation.
//!
//! Each check evaluates a scalar loss twice per input coordinate with a
//! central difference (h = 1e-5) and compares against the reverse-mode
//! gradient, requiring relative error below 1e-4.

use rand::Rng;

use tst::tensor::{BnState, Mode, Tape, Tensor, Var};
use tst::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Run `f` on leaves of the given shapes and compare reverse-mode gradients
/// with central finite differences, coordinate by coordinate.
fn fd_check(
    name: &str,
    shapes: &[&[usize]],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) {
    let mut rng = tst::rng::derive(0xfd, &[shapes.len() as u64]);
    let base: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        f(&tape, &vars).unwrap().value().item()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).unwrap()).collect();

    for (j, tensor) in base.iter().enumerate() {
        for k in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[j].data_mut()[k] += H;
            let mut minus = base.clone();
            minus[j].data_mut()[k] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let analytic = grads[j].data()[k];
            let err = rel_err(analytic, numeric);
            assert!(
                err < TOL,
                "{name}: input {j} coord {k}: analytic {analytic} vs numeric {numeric} (rel err {err:.2e})"
            );
        }
    }
}

/// Weighted sum so the loss exercises every output coordinate distinctly.
fn weighted_sum<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let n = v.value().numel();
    let weights = Tensor::new(v.shape(), (0..n).map(|i| 0.3 + 0.1 * i as f64).collect());
    let w = v.tape().constant(weights);
    Ok(v.mul(w)?.sum_all())
}

#[test]
fn elementwise_ops() {
    fd_check("add", &[&[2, 3], &[2, 3]], |_, v| weighted_sum(v[0].add(v[1])?));
    fd_check("sub", &[&[2, 3], &[2, 3]], |_, v| weighted_sum(v[0].sub(v[1])?));
    fd_check("mul", &[&[2, 3], &[2, 3]], |_, v| weighted_sum(v[0].mul(v[1])?));
    fd_check("scale", &[&[4]], |_, v| weighted_sum(v[0].scale(-2.5)));
    fd_check("add_broadcast", &[&[2, 3, 4], &[4]], |_, v| {
        weighted_sum(v[0].add_broadcast(v[1])?)
    });
}

#[test]
fn shape_ops() {
    fd_check("reshape", &[&[2, 6]], |_, v| weighted_sum(v[0].reshape(vec![3, 4])?));
    fd_check("permute", &[&[2, 3, 4]], |_, v| weighted_sum(v[0].permute(&[2, 0, 1])));
    fd_check("sum_all", &[&[3, 3]], |_, v| Ok(v[0].sum_all()));
}

#[test]
fn matmul_all_transpose_flags() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[4, 2] } else { &[2, 4] };
        let b: &[usize] = if tb { &[3, 4] } else { &[4, 3] };
        fd_check(&format!("matmul ta={ta} tb={tb}"), &[a, b], move |_, v| {
            weighted_sum(v[0].matmul_ex(v[1], ta, tb)?)
        });
    }
}

#[test]
fn matmul_batched() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        fd_check(&format!("matmul_batched ta={ta} tb={tb}"), &[a, b], move |_, v| {
            weighted_sum(v[0].matmul_batched_ex(v[1], ta, tb)?)
        });
    }
}

#[test]
fn activations_and_softmax() {
    fd_check("gelu", &[&[2, 5]], |_, v| weighted_sum(v[0].gelu()));
    fd_check("softmax", &[&[2, 4]], |_, v| weighted_sum(v[0].softmax_last_dim()?));
    fd_check("cross_entropy", &[&[3, 4]], |_, v| v[0].cross_entropy_mean(&[1, 0, 3]));
}

#[test]
fn normalization_layers() {
    fd_check("layernorm", &[&[3, 4], &[4], &[4]], |_, v| {
        weighted_sum(v[0].layernorm(v[1], v[2])?)
    });
    // train mode, ragged lengths so padded positions exist
    fd_check("batchnorm_train", &[&[2, 3, 4], &[4], &[4]], |_, v| {
        let mut state = BnState::new(4);
        weighted_sum(v[0].batchnorm_timewise(&[3, 2], v[1], v[2], &mut state, Mode::Train)?)
    });
    fd_check("batchnorm_eval", &[&[2, 3, 4], &[4], &[4]], |_, v| {
        let mut state = BnState::new(4);
        state.running_mean = vec![0.1, -0.2, 0.3, 0.05];
        state.running_var = vec![1.1, 0.9, 1.3, 0.7];
        weighted_sum(v[0].batchnorm_timewise(&[3, 2], v[1], v[2], &mut state, Mode::Eval)?)
    });
}

#[test]
fn attention_bias_and_dropout() {
    // bias broadcast over heads: scores [B*heads, w, w]
    let bias = Tensor::new(vec![2, 3], vec![0.0, 0.0, -1e9, 0.0, 0.0, 0.0]);
    fd_check("attention_bias", &[&[4, 3, 3]], move |_, v| {
        weighted_sum(v[0].add_attention_bias(&bias, 2)?.softmax_last_dim()?)
    });
    // dropout with a fixed stream is a deterministic mask, hence differentiable
    fd_check("dropout_train", &[&[4, 4]], |_, v| {
        let mut rng = tst::rng::derive(7, &[1]);
        weighted_sum(v[0].dropout(0.5, Mode::Train, &mut rng)?)
    });
    fd_check("dropout_eval", &[&[4, 4]], |_, v| {
        let mut rng = tst::rng::derive(7, &[1]);
        weighted_sum(v[0].dropout(0.5, Mode::Eval, &mut rng)?)
    });
}

#[test]
fn conv1d_variants() {
    // kernels [d_out, kw, m]
    fd_check("conv1d_same", &[&[2, 5, 3], &[4, 3, 3]], |_, v| {
        weighted_sum(v[0].conv1d_time(v[1], 1, 1, true)?)
    });
    fd_check("conv1d_valid_stride", &[&[2, 7, 3], &[4, 3, 3]], |_, v| {
        weighted_sum(v[0].conv1d_time(v[1], 2, 1, false)?)
    });
    fd_check("conv1d_dilated", &[&[2, 7, 3], &[4, 3, 3]], |_, v| {
        weighted_sum(v[0].conv1d_time(v[1], 1, 2, true)?)
    });
}

#[test]
fn composite_chain() {
    // A small end-to-end chain: linear -> gelu -> layernorm -> softmax -> ce
    fd_check(
        "composite",
        &[&[3, 4], &[4, 5], &[5], &[5], &[5]],
        |_, v| {
            let h = v[0].matmul(v[1])?.add_broadcast(v[2])?.gelu();
            let n = h.layernorm(v[3], v[4])?;
            n.cross_entropy_mean(&[0, 2, 4])
        },
    );
}

#[test]
fn gradient_accumulation_across_backward_calls() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
    let l1 = x.mul(x).unwrap().sum_all();
    tape.backward(l1).unwrap();
    let l2 = x.scale(3.0).sum_all();
    tape.backward(l2).unwrap();
    // d(x^2)/dx + d(3x)/dx = 2x + 3
    let g = tape.grad(x).unwrap();
    assert_eq!(g.data(), &[5.0, 7.0]);
}
