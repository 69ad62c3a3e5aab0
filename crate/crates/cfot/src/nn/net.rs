//! The residual MLP: forward, reverse-mode, and the forward-over-reverse
//! pass used by energy parameterisations.

use ndarray::Array2;

use super::ops::{
    act_bwd, act_dual_bwd, act_dual_fwd, act_fwd, layernorm_bwd, layernorm_dual_bwd,
    layernorm_dual_fwd, layernorm_fwd, linear_bwd_input, linear_bwd_params, linear_fwd, LnCache,
    LnDualCache,
};
use super::{Activation, NetworkSpec, Params};
use crate::error::{Error, Result};

struct BlockCache {
    ln: LnCache,
    n: Array2<f64>,
    a: Array2<f64>,
    s: Array2<f64>,
}

/// Intermediate activations of one forward pass, sufficient for any number
/// of backward passes against the same `(params, input)`.
pub struct Tape {
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
    head_ln: LnCache,
    head_n: Array2<f64>,
    activation: Activation,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.input.nrows()
    }
}

fn check_input(spec: &NetworkSpec, input: &Array2<f64>) -> Result<()> {
    if input.ncols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "nn::forward",
            expected: format!("{} input columns", spec.input_dim),
            got: format!("{}", input.ncols()),
        });
    }
    Ok(())
}

/// Runs the network on a batch of rows, returning outputs and the tape.
pub fn forward(params: &Params, input: &Array2<f64>, act: Activation) -> Result<(Array2<f64>, Tape)> {
    let spec = params.spec;
    check_input(&spec, input)?;
    let h_dim = spec.hidden_dim;

    let mut h = linear_fwd(
        input,
        params.mat(spec.proj_w(), spec.input_dim, h_dim),
        &params.data[spec.proj_b()],
    );
    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for k in 0..spec.n_blocks {
        let (n, ln) = layernorm_fwd(&h, &params.data[spec.ln_g(k)], &params.data[spec.ln_b(k)]);
        let a = linear_fwd(&n, params.mat(spec.w1(k), h_dim, h_dim), &params.data[spec.b1(k)]);
        let s = act_fwd(act, &a);
        let r = linear_fwd(&s, params.mat(spec.w2(k), h_dim, h_dim), &params.data[spec.b2(k)]);
        h += &r;
        blocks.push(BlockCache { ln, n, a, s });
    }
    let (head_n, head_ln) = layernorm_fwd(
        &h,
        &params.data[spec.head_ln_g()],
        &params.data[spec.head_ln_b()],
    );
    let output = linear_fwd(
        &head_n,
        params.mat(spec.head_w(), h_dim, spec.output_dim),
        &params.data[spec.head_b()],
    );
    Ok((
        output,
        Tape {
            input: input.clone(),
            blocks,
            head_ln,
            head_n,
            activation: act,
        },
    ))
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wants {
    ParamsOnly,
    InputOnly,
    Both,
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: Option<Params>,
    pub input: Option<Array2<f64>>,
}

/// Reverse-mode pass: gradients of `⟨output, cotangent⟩` (summed over the
/// batch) with respect to the parameters and/or the input rows.
pub fn backward(
    params: &Params,
    tape: &Tape,
    cotangent: &Array2<f64>,
    wants: Wants,
) -> Result<Gradients> {
    let spec = params.spec;
    let h_dim = spec.hidden_dim;
    if cotangent.dim() != (tape.input.nrows(), spec.output_dim) {
        return Err(Error::ShapeMismatch {
            op: "nn::backward",
            expected: format!("({}, {})", tape.input.nrows(), spec.output_dim),
            got: format!("{:?}", cotangent.dim()),
        });
    }
    let want_params = matches!(wants, Wants::ParamsOnly | Wants::Both);
    let mut grads = want_params.then(|| Params::zeros(spec));

    // Head.
    if let Some(g) = grads.as_mut() {
        let (range, rows) = (spec.head_w(), h_dim);
        let mut dw = g.mat_mut(range, rows, spec.output_dim);
        ndarray::linalg::general_mat_mul(1.0, &tape.head_n.t(), cotangent, 1.0, &mut dw);
        let db = &mut g.data[spec.head_b()];
        for row in cotangent.rows() {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let dn_head = linear_bwd_input(cotangent, params.mat(spec.head_w(), h_dim, spec.output_dim));
    let mut dh = {
        let (mut dg_buf, mut db_buf) = (vec![0.0; h_dim], vec![0.0; h_dim]);
        let dh = layernorm_bwd(
            &dn_head,
            &tape.head_ln,
            &params.data[spec.head_ln_g()],
            &mut dg_buf,
            &mut db_buf,
        );
        if let Some(g) = grads.as_mut() {
            g.data[spec.head_ln_g()].copy_from_slice(&dg_buf);
            g.data[spec.head_ln_b()].copy_from_slice(&db_buf);
        }
        dh
    };

    // Blocks, in reverse.
    for k in (0..spec.n_blocks).rev() {
        let cache = &tape.blocks[k];
        // dh is the adjoint of the block output = adjoint of the residual
        // branch output as well.
        if let Some(g) = grads.as_mut() {
            let dw2 = g.mat_mut(spec.w2(k), h_dim, h_dim);
            let mut db2_buf = vec![0.0; h_dim];
            linear_bwd_params(&cache.s, &dh, dw2, &mut db2_buf);
            g.data[spec.b2(k)].copy_from_slice(&db2_buf);
        }
        let ds = linear_bwd_input(&dh, params.mat(spec.w2(k), h_dim, h_dim));
        let da = act_bwd(tape.activation, &ds, &cache.a);
        if let Some(g) = grads.as_mut() {
            let dw1 = g.mat_mut(spec.w1(k), h_dim, h_dim);
            let mut db1_buf = vec![0.0; h_dim];
            linear_bwd_params(&cache.n, &da, dw1, &mut db1_buf);
            g.data[spec.b1(k)].copy_from_slice(&db1_buf);
        }
        let dn = linear_bwd_input(&da, params.mat(spec.w1(k), h_dim, h_dim));
        let (mut dg_buf, mut db_buf) = (vec![0.0; h_dim], vec![0.0; h_dim]);
        let dh_branch = layernorm_bwd(
            &dn,
            &cache.ln,
            &params.data[spec.ln_g(k)],
            &mut dg_buf,
            &mut db_buf,
        );
        if let Some(g) = grads.as_mut() {
            g.data[spec.ln_g(k)].copy_from_slice(&dg_buf);
            g.data[spec.ln_b(k)].copy_from_slice(&db_buf);
        }
        dh += &dh_branch;
    }

    if let Some(g) = grads.as_mut() {
        let dw = g.mat_mut(spec.proj_w(), spec.input_dim, h_dim);
        let mut db_buf = vec![0.0; h_dim];
        linear_bwd_params(&tape.input, &dh, dw, &mut db_buf);
        g.data[spec.proj_b()].copy_from_slice(&db_buf);
    }
    let input = matches!(wants, Wants::InputOnly | Wants::Both)
        .then(|| linear_bwd_input(&dh, params.mat(spec.proj_w(), spec.input_dim, h_dim)));

    Ok(Gradients {
        params: grads,
        input,
    })
}

/// Exact gradients of `⟨output, cotangent⟩` w.r.t. every parameter.
pub fn backward_params(params: &Params, tape: &Tape, cotangent: &Array2<f64>) -> Result<Params> {
    Ok(backward(params, tape, cotangent, Wants::ParamsOnly)?
        .params
        .expect("params requested"))
}

/// Exact gradient of `⟨output, cotangent⟩` w.r.t. the input rows.
pub fn backward_input(params: &Params, tape: &Tape, cotangent: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(backward(params, tape, cotangent, Wants::InputOnly)?
        .input
        .expect("input requested"))
}

/// Parameter gradient of `Σ_rows ⟨dir_row, ∇_input mean(output_row)⟩`.
///
/// This is the quantity needed to train an energy field: with
/// `dir = ∂loss/∂v` and `v = ∇_x E`, it equals `∇_θ loss`. Implemented as
/// forward-over-reverse: a tangent forward pass along `dir` computes
/// `Ė = ⟨dir, ∇_input E⟩` per row, and the adjoint of that combined program
/// yields exact parameter gradients.
pub fn grad_energy_params(params: &Params, tape: &Tape, dir: &Array2<f64>) -> Result<Params> {
    let spec = params.spec;
    let h_dim = spec.hidden_dim;
    if dir.dim() != tape.input.dim() {
        return Err(Error::ShapeMismatch {
            op: "nn::grad_energy_params",
            expected: format!("{:?}", tape.input.dim()),
            got: format!("{:?}", dir.dim()),
        });
    }
    let m = tape.input.nrows();
    let act = tape.activation;

    // Tangent forward pass along `dir`.
    let mut hdot = linear_fwd(
        dir,
        params.mat(spec.proj_w(), spec.input_dim, h_dim),
        &vec![0.0; h_dim],
    );
    struct BlockDual {
        ln: LnDualCache,
        ndot: Array2<f64>,
        adot: Array2<f64>,
        sdot: Array2<f64>,
    }
    let mut duals = Vec::with_capacity(spec.n_blocks);
    for (k, cache) in tape.blocks.iter().enumerate() {
        let (ndot, ln_dual) = layernorm_dual_fwd(&hdot, &cache.ln, &params.data[spec.ln_g(k)]);
        let adot = {
            let mut adot = Array2::zeros(ndot.raw_dim());
            ndarray::linalg::general_mat_mul(
                1.0,
                &ndot,
                &params.mat(spec.w1(k), h_dim, h_dim),
                0.0,
                &mut adot,
            );
            adot
        };
        let sdot = act_dual_fwd(act, &adot, &cache.a);
        let mut rdot = Array2::zeros(hdot.raw_dim());
        ndarray::linalg::general_mat_mul(
            1.0,
            &sdot,
            &params.mat(spec.w2(k), h_dim, h_dim),
            0.0,
            &mut rdot,
        );
        hdot += &rdot;
        duals.push(BlockDual {
            ln: ln_dual,
            ndot,
            adot,
            sdot,
        });
    }
    let (head_ndot, head_ln_dual) =
        layernorm_dual_fwd(&hdot, &tape.head_ln, &params.data[spec.head_ln_g()]);
    // ẏ = ṅ_head · W_head; Ė = mean(ẏ) per row. The primal output adjoint
    // is zero, the tangent output adjoint is 1/output_dim per entry.

    let mut grads = Params::zeros(spec);
    let ybar = Array2::zeros((m, spec.output_dim));
    let ydotbar = Array2::from_elem((m, spec.output_dim), 1.0 / spec.output_dim as f64);

    // Head linear adjoint (primal + tangent).
    {
        let mut dw = grads.mat_mut(spec.head_w(), h_dim, spec.output_dim);
        ndarray::linalg::general_mat_mul(1.0, &tape.head_n.t(), &ybar, 1.0, &mut dw);
        ndarray::linalg::general_mat_mul(1.0, &head_ndot.t(), &ydotbar, 1.0, &mut dw);
        let db = &mut grads.data[spec.head_b()];
        for row in ybar.rows() {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let nbar_head = linear_bwd_input(&ybar, params.mat(spec.head_w(), h_dim, spec.output_dim));
    let ndotbar_head = linear_bwd_input(&ydotbar, params.mat(spec.head_w(), h_dim, spec.output_dim));
    let (mut hbar, mut hdotbar) = {
        let (mut dg, mut db) = (vec![0.0; h_dim], vec![0.0; h_dim]);
        let out = layernorm_dual_bwd(
            &nbar_head,
            &ndotbar_head,
            &tape.head_ln,
            &head_ln_dual,
            &params.data[spec.head_ln_g()],
            &mut dg,
            &mut db,
        );
        grads.data[spec.head_ln_g()].copy_from_slice(&dg);
        grads.data[spec.head_ln_b()].copy_from_slice(&db);
        out
    };

    for k in (0..spec.n_blocks).rev() {
        let cache = &tape.blocks[k];
        let dual = &duals[k];
        // Residual: adjoint of branch output r equals (hbar, hdotbar).
        // Linear W2 adjoint.
        {
            let mut dw2 = grads.mat_mut(spec.w2(k), h_dim, h_dim);
            ndarray::linalg::general_mat_mul(1.0, &cache.s.t(), &hbar, 1.0, &mut dw2);
            ndarray::linalg::general_mat_mul(1.0, &dual.sdot.t(), &hdotbar, 1.0, &mut dw2);
            let db2 = &mut grads.data[spec.b2(k)];
            for row in hbar.rows() {
                for (acc, &v) in db2.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let sbar = linear_bwd_input(&hbar, params.mat(spec.w2(k), h_dim, h_dim));
        let sdotbar = linear_bwd_input(&hdotbar, params.mat(spec.w2(k), h_dim, h_dim));
        let (abar, adotbar) = act_dual_bwd(act, &sbar, &sdotbar, &cache.a, &dual.adot);
        // Linear W1 adjoint.
        {
            let mut dw1 = grads.mat_mut(spec.w1(k), h_dim, h_dim);
            ndarray::linalg::general_mat_mul(1.0, &cache.n.t(), &abar, 1.0, &mut dw1);
            ndarray::linalg::general_mat_mul(1.0, &dual.ndot.t(), &adotbar, 1.0, &mut dw1);
            let db1 = &mut grads.data[spec.b1(k)];
            for row in abar.rows() {
                for (acc, &v) in db1.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let nbar = linear_bwd_input(&abar, params.mat(spec.w1(k), h_dim, h_dim));
        let ndotbar = linear_bwd_input(&adotbar, params.mat(spec.w1(k), h_dim, h_dim));
        let (hbar_branch, hdotbar_branch) = {
            let (mut dg, mut db) = (vec![0.0; h_dim], vec![0.0; h_dim]);
            let out = layernorm_dual_bwd(
                &nbar,
                &ndotbar,
                &cache.ln,
                &dual.ln,
                &params.data[spec.ln_g(k)],
                &mut dg,
                &mut db,
            );
            grads.data[spec.ln_g(k)].copy_from_slice(&dg);
            grads.data[spec.ln_b(k)].copy_from_slice(&db);
            out
        };
        hbar += &hbar_branch;
        hdotbar += &hdotbar_branch;
    }

    // Projection adjoint: y = x·W + b, ẏ = ẋ·W with ẋ = dir.
    {
        let mut dw = grads.mat_mut(spec.proj_w(), spec.input_dim, h_dim);
        ndarray::linalg::general_mat_mul(1.0, &tape.input.t(), &hbar, 1.0, &mut dw);
        ndarray::linalg::general_mat_mul(1.0, &dir.t(), &hdotbar, 1.0, &mut dw);
        let db = &mut grads.data[spec.proj_b()];
        for row in hbar.rows() {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Ok(grads)
}
