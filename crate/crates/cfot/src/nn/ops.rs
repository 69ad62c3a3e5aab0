//! Batched layer primitives.
//!
//! Activations are `(batch × width)` row-major arrays; weights are
//! `(in × out)` views into flat parameter storage. Each op comes in up to
//! four flavours: forward, backward, tangent forward (directional derivative
//! of the forward pass w.r.t. the network input), and the adjoint of the
//! combined primal+tangent program. The last one is what makes exact
//! gradients of input-gradient losses possible.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::{Activation, LAYER_NORM_EPS};

pub(super) fn linear_fwd(x: &Array2<f64>, w: ArrayView2<f64>, b: &[f64]) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.ncols()));
    general_mat_mul(1.0, x, &w, 0.0, &mut y);
    for mut row in y.rows_mut() {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

/// `dX = dY · Wᵀ`.
pub(super) fn linear_bwd_input(dy: &Array2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros((dy.nrows(), w.nrows()));
    general_mat_mul(1.0, dy, &w.t(), 0.0, &mut dx);
    dx
}

/// Accumulates `dW += Xᵀ·dY`, `db += colsum(dY)`.
pub(super) fn linear_bwd_params(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    mut dw: ArrayViewMut2<f64>,
    db: &mut [f64],
) {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut dw);
    for row in dy.rows() {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn act_value(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Silu => a * sigmoid(a),
        Activation::Identity => a,
    }
}

fn act_deriv(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Silu => {
            let s = sigmoid(a);
            s * (1.0 + a * (1.0 - s))
        }
        Activation::Identity => 1.0,
    }
}

fn act_second_deriv(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Silu => {
            let s = sigmoid(a);
            let sp = s * (1.0 - s);
            sp * (2.0 + a * (1.0 - 2.0 * s))
        }
        Activation::Identity => 0.0,
    }
}

pub(super) fn act_fwd(act: Activation, a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| act_value(act, v))
}

/// `dA = dS ⊙ f'(A)`.
pub(super) fn act_bwd(act: Activation, ds: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut da = ds.clone();
    for (d, &av) in da.iter_mut().zip(a.iter()) {
        *d *= act_deriv(act, av);
    }
    da
}

/// Tangent of the activation: `Ṡ = f'(A) ⊙ Ȧ`.
pub(super) fn act_dual_fwd(act: Activation, adot: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut sdot = adot.clone();
    for (d, &av) in sdot.iter_mut().zip(a.iter()) {
        *d *= act_deriv(act, av);
    }
    sdot
}

/// Adjoint of `(S, Ṡ) = (f(A), f'(A)⊙Ȧ)`:
/// `Ā += S̄⊙f'(A) + Ṡ̄⊙f''(A)⊙Ȧ` and `Ǡ += Ṡ̄⊙f'(A)`.
pub(super) fn act_dual_bwd(
    act: Activation,
    sbar: &Array2<f64>,
    sdotbar: &Array2<f64>,
    a: &Array2<f64>,
    adot: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut abar = Array2::zeros(a.raw_dim());
    let mut adotbar = Array2::zeros(a.raw_dim());
    for (((((ab, adb), &sb), &sdb), &av), &advv) in abar
        .iter_mut()
        .zip(adotbar.iter_mut())
        .zip(sbar.iter())
        .zip(sdotbar.iter())
        .zip(a.iter())
        .zip(adot.iter())
    {
        let d1 = act_deriv(act, av);
        let d2 = act_second_deriv(act, av);
        *ab = sb * d1 + sdb * d2 * advv;
        *adb = sdb * d1;
    }
    (abar, adotbar)
}

/// Per-row LayerNorm cache: the normalized pre-gain activations and the
/// standard-deviation denominator `sqrt(var + eps)`.
pub(super) struct LnCache {
    pub q: Array2<f64>,
    pub sig: Vec<f64>,
}

/// `n = gain ⊙ (h − mean)/sqrt(var + eps) + bias`, per row.
pub(super) fn layernorm_fwd(h: &Array2<f64>, gain: &[f64], bias: &[f64]) -> (Array2<f64>, LnCache) {
    let (m, width) = (h.nrows(), h.ncols());
    let mut q = Array2::zeros((m, width));
    let mut n = Array2::zeros((m, width));
    let mut sig = Vec::with_capacity(m);
    for ((h_row, mut q_row), mut n_row) in h.rows().into_iter().zip(q.rows_mut()).zip(n.rows_mut())
    {
        let mean = h_row.sum() / width as f64;
        let var = h_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let s = (var + LAYER_NORM_EPS).sqrt();
        sig.push(s);
        for (((qv, nv), &hv), (&g, &b)) in q_row
            .iter_mut()
            .zip(n_row.iter_mut())
            .zip(h_row)
            .zip(gain.iter().zip(bias))
        {
            let qq = (hv - mean) / s;
            *qv = qq;
            *nv = g * qq + b;
        }
    }
    (n, LnCache { q, sig })
}

/// Backward through LayerNorm. Accumulates gain/bias gradients and returns
/// `dh`.
pub(super) fn layernorm_bwd(
    dn: &Array2<f64>,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let (m, width) = (dn.nrows(), dn.ncols());
    let mut dh = Array2::zeros((m, width));
    for ((dn_row, q_row), (mut dh_row, &s)) in dn
        .rows()
        .into_iter()
        .zip(cache.q.rows())
        .zip(dh.rows_mut().into_iter().zip(&cache.sig))
    {
        let mut sum_dq = 0.0;
        let mut sum_dq_q = 0.0;
        for ((&dnv, &qv), (dg, db)) in dn_row
            .iter()
            .zip(q_row)
            .zip(dgain.iter_mut().zip(dbias.iter_mut()))
        {
            *dg += dnv * qv;
            *db += dnv;
        }
        for ((&dnv, &g), &qv) in dn_row.iter().zip(gain).zip(q_row) {
            let dq = dnv * g;
            sum_dq += dq;
            sum_dq_q += dq * qv;
        }
        let inv_w = 1.0 / width as f64;
        for (((dhv, &dnv), &g), &qv) in dh_row.iter_mut().zip(dn_row).zip(gain).zip(q_row) {
            let dq = dnv * g;
            *dhv = (dq - sum_dq * inv_w - qv * sum_dq_q * inv_w) / s;
        }
    }
    dh
}

/// Tangent cache of one LayerNorm: `q̇` and the per-row `σ̇`.
pub(super) struct LnDualCache {
    pub qdot: Array2<f64>,
    pub sigdot: Vec<f64>,
}

/// Tangent of the LayerNorm: given `ḣ`, produces `ṅ = gain ⊙ q̇` where
/// `q̇ = (ḋ − q·σ̇)/σ`, `ḋ = ḣ − mean(ḣ)`, `σ̇ = mean(q ⊙ ḋ)`.
pub(super) fn layernorm_dual_fwd(
    hdot: &Array2<f64>,
    cache: &LnCache,
    gain: &[f64],
) -> (Array2<f64>, LnDualCache) {
    let (m, width) = (hdot.nrows(), hdot.ncols());
    let inv_w = 1.0 / width as f64;
    let mut qdot = Array2::zeros((m, width));
    let mut ndot = Array2::zeros((m, width));
    let mut sigdot = Vec::with_capacity(m);
    for (((hdot_row, q_row), &s), (mut qdot_row, mut ndot_row)) in hdot
        .rows()
        .into_iter()
        .zip(cache.q.rows())
        .zip(&cache.sig)
        .zip(qdot.rows_mut().into_iter().zip(ndot.rows_mut()))
    {
        let mdot = hdot_row.sum() * inv_w;
        let sdot = hdot_row
            .iter()
            .zip(q_row)
            .map(|(&hd, &qv)| qv * (hd - mdot))
            .sum::<f64>()
            * inv_w;
        sigdot.push(sdot);
        for ((((qd, nd), &hd), &qv), &g) in qdot_row
            .iter_mut()
            .zip(ndot_row.iter_mut())
            .zip(hdot_row)
            .zip(q_row)
            .zip(gain)
        {
            let ddot = hd - mdot;
            let qdv = (ddot - qv * sdot) / s;
            *qd = qdv;
            *nd = g * qdv;
        }
    }
    (ndot, LnDualCache { qdot, sigdot })
}

/// Adjoint of the combined primal+tangent LayerNorm program.
///
/// Inputs are the adjoints of `n` and `ṅ`; outputs are the adjoints of `h`
/// and `ḣ`. Gain/bias gradients accumulate `γ̄ += n̄⊙q + ṅ̄⊙q̇`, `β̄ += n̄`.
#[allow(clippy::too_many_arguments)]
pub(super) fn layernorm_dual_bwd(
    nbar: &Array2<f64>,
    ndotbar: &Array2<f64>,
    cache: &LnCache,
    dual: &LnDualCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> (Array2<f64>, Array2<f64>) {
    let (m, width) = (nbar.nrows(), nbar.ncols());
    let inv_w = 1.0 / width as f64;
    let mut hbar = Array2::zeros((m, width));
    let mut hdotbar = Array2::zeros((m, width));
    for row in 0..m {
        let q = cache.q.row(row);
        let qdot = dual.qdot.row(row);
        let s = cache.sig[row];
        let sdot = dual.sigdot[row];
        let nbar_r = nbar.row(row);
        let ndotbar_r = ndotbar.row(row);

        // Parameter gradients and seeds for q̄, q̇̄.
        let mut qbar: Vec<f64> = Vec::with_capacity(width);
        let mut qdotbar: Vec<f64> = Vec::with_capacity(width);
        for i in 0..width {
            dgain[i] += nbar_r[i] * q[i] + ndotbar_r[i] * qdot[i];
            dbias[i] += nbar_r[i];
            qbar.push(nbar_r[i] * gain[i]);
            qdotbar.push(ndotbar_r[i] * gain[i]);
        }

        // Reverse the tangent chain: q̇ = (ḋ − q σ̇)/σ with ḋ = q̇σ + qσ̇.
        let mut ddotbar: Vec<f64> = qdotbar.iter().map(|&v| v / s).collect();
        let mut sigdotbar = 0.0;
        let mut sigbar = 0.0;
        for i in 0..width {
            sigdotbar -= qdotbar[i] * q[i] / s;
            sigbar -= qdotbar[i] * qdot[i] / s;
            qbar[i] -= qdotbar[i] * sdot / s;
        }
        // σ̇ = mean(q ⊙ ḋ).
        for i in 0..width {
            let ddot = qdot[i] * s + q[i] * sdot;
            qbar[i] += sigdotbar * inv_w * ddot;
            ddotbar[i] += sigdotbar * inv_w * q[i];
        }
        // ḋ = ḣ − mean(ḣ).
        let mean_ddotbar = ddotbar.iter().sum::<f64>() * inv_w;
        for i in 0..width {
            hdotbar[[row, i]] = ddotbar[i] - mean_ddotbar;
        }

        // Reverse the primal chain: q = d/σ, σ = sqrt(var + eps).
        let mut dbar: Vec<f64> = qbar.iter().map(|&v| v / s).collect();
        for i in 0..width {
            sigbar -= qbar[i] * q[i] / s;
        }
        let varbar = sigbar / (2.0 * s);
        for i in 0..width {
            let d = q[i] * s;
            dbar[i] += 2.0 * inv_w * varbar * d;
        }
        let mean_dbar = dbar.iter().sum::<f64>() * inv_w;
        for i in 0..width {
            hbar[[row, i]] = dbar[i] - mean_dbar;
        }
    }
    (hbar, hdotbar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| 2.0 * rng.random::<f64>() - 1.0)
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut rng = substream(0, Domain::Probe, 10);
        // Non-degenerate input: variance well above the epsilon guard.
        let h = rand_mat(5, 64, &mut rng) * 40.0;
        let gain = vec![1.0; 64];
        let bias = vec![0.0; 64];
        let (_, cache) = layernorm_fwd(&h, &gain, &bias);
        for q_row in cache.q.rows() {
            let mean = q_row.sum() / 64.0;
            let var = q_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_zero_variance_guarded() {
        let h = Array2::from_elem((1, 8), 3.25);
        let gain = vec![2.0; 8];
        let bias = vec![0.5; 8];
        let (n, cache) = layernorm_fwd(&h, &gain, &bias);
        // All-equal entries normalize to zero before gain/bias.
        assert!(cache.q.iter().all(|&v| v == 0.0));
        assert!(n.iter().all(|&v| v == 0.5));
    }

    /// Central-difference oracle for a scalar-valued function of a matrix.
    fn fd_grad(
        f: &mut dyn FnMut(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn layernorm_bwd_matches_finite_differences() {
        let mut rng = substream(0, Domain::Probe, 11);
        let h = rand_mat(3, 7, &mut rng);
        let gain: Vec<f64> = (0..7).map(|_| 0.5 + rng.random::<f64>()).collect();
        let bias: Vec<f64> = (0..7).map(|_| rng.random::<f64>() - 0.5).collect();
        let w = rand_mat(3, 7, &mut rng); // fixed cotangent-producing weights
        let loss = |n: &Array2<f64>| (n * &w).sum();

        let (n, cache) = layernorm_fwd(&h, &gain, &bias);
        let _ = n;
        let mut dgain = vec![0.0; 7];
        let mut dbias = vec![0.0; 7];
        let dh = layernorm_bwd(&w, &cache, &gain, &mut dgain, &mut dbias);

        let g = gain.clone();
        let b = bias.clone();
        let fd = fd_grad(
            &mut |hh: &Array2<f64>| loss(&layernorm_fwd(hh, &g, &b).0),
            &h,
            1e-6,
        );
        for (a, e) in dh.iter().zip(fd.iter()) {
            assert!((a - e).abs() < 1e-6 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn silu_derivatives_match_finite_differences() {
        for a in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let f = |x: f64| act_value(Activation::Silu, x);
            let d1 = (f(a + h) - f(a - h)) / (2.0 * h);
            let d2 = (f(a + h) - 2.0 * f(a) + f(a - h)) / (h * h);
            assert!((act_deriv(Activation::Silu, a) - d1).abs() < 1e-8);
            assert!((act_second_deriv(Activation::Silu, a) - d2).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_bwd_closed_form() {
        // Two stacked linear layers: the input gradient of sum(Y) is
        // 1·(W1·W2)ᵀ rows; the gradient through the ops must equal the
        // hand-computed matrix product.
        let mut rng = substream(0, Domain::Probe, 12);
        let x = rand_mat(4, 3, &mut rng);
        let w1_arr = rand_mat(3, 5, &mut rng);
        let w2_arr = rand_mat(5, 2, &mut rng);
        let b1 = vec![0.1; 5];
        let b2 = vec![-0.2; 2];
        let y1 = linear_fwd(&x, w1_arr.view(), &b1);
        let y2 = linear_fwd(&y1, w2_arr.view(), &b2);
        assert_eq!(y2.dim(), (4, 2));

        let dy = Array2::from_elem((4, 2), 1.0);
        let dy1 = linear_bwd_input(&dy, w2_arr.view());
        let dx = linear_bwd_input(&dy1, w1_arr.view());

        let chain = w1_arr.dot(&w2_arr); // 3×2
        for r in 0..4 {
            for c in 0..3 {
                let expect: f64 = chain.row(c).sum();
                assert!((dx[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_linear_input_grad_of_mean_is_column_mean() {
        let mut rng = substream(0, Domain::Probe, 13);
        let x = rand_mat(2, 4, &mut rng);
        let w = rand_mat(4, 3, &mut rng);
        let b = vec![0.0; 3];
        let _y = linear_fwd(&x, w.view(), &b);
        let dy = Array2::from_elem((2, 3), 1.0 / 3.0); // cotangent of per-row mean
        let dx = linear_bwd_input(&dy, w.view());
        for r in 0..2 {
            for c in 0..4 {
                let expect: f64 = w.row(c).mean().unwrap();
                assert!((dx[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_dual_fwd_matches_directional_difference() {
        let mut rng = substream(0, Domain::Probe, 14);
        let h = rand_mat(2, 6, &mut rng);
        let dir = rand_mat(2, 6, &mut rng);
        let gain: Vec<f64> = (0..6).map(|_| 0.5 + rng.random::<f64>()).collect();
        let bias = vec![0.0; 6];
        let (_, cache) = layernorm_fwd(&h, &gain, &bias);
        let (ndot, _) = layernorm_dual_fwd(&dir, &cache, &gain);

        let eps = 1e-6;
        let hp = &h + &(&dir * eps);
        let hm = &h - &(&dir * eps);
        let np = layernorm_fwd(&hp, &gain, &bias).0;
        let nm = layernorm_fwd(&hm, &gain, &bias).0;
        let fd = (&np - &nm) / (2.0 * eps);
        for (a, e) in ndot.iter().zip(fd.iter()) {
            assert!((a - e).abs() < 1e-6 * e.abs().max(1.0), "{a} vs {e}");
        }
    }
}
