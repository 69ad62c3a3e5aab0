//! Counterfactual inference by ODE integration.
//!
//! Abduction solves the flow ODE backwards from the observation to the
//! prior (`t: 1 → 0`), prediction solves it forwards from the abducted
//! noise under the counterfactual parents. Backward integration reuses the
//! forward code path on the negated field with `s = 1 − t`, so a sign error
//! anywhere becomes visible as a broken round trip.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::FieldEval;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Rk4,
    AdaptiveRk45,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Integrator configuration. `nfe` counts field evaluations per leg for the
/// fixed-step solvers (RK4 spends four per step); the adaptive solver uses
/// the tolerances instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    pub solver: Solver,
    pub nfe: usize,
    pub rtol: f64,
    pub atol: f64,
    pub direction: Direction,
}

impl OdeConfig {
    pub fn euler(nfe: usize) -> Self {
        Self {
            solver: Solver::Euler,
            nfe,
            rtol: 1e-5,
            atol: 1e-5,
            direction: Direction::Forward,
        }
    }

    pub fn rk4(nfe: usize) -> Self {
        Self {
            solver: Solver::Rk4,
            ..Self::euler(nfe)
        }
    }

    /// Embedded 4(5) pair with PI step control; defaults rtol = atol = 1e-5.
    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            solver: Solver::AdaptiveRk45,
            nfe: 0,
            rtol,
            atol,
            direction: Direction::Forward,
        }
    }

    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        match self.solver {
            Solver::Euler | Solver::Rk4 => {
                if self.nfe == 0 {
                    return Err(Error::Config("fixed-step solvers need nfe >= 1".into()));
                }
            }
            Solver::AdaptiveRk45 => {
                if self.rtol <= 0.0 || self.atol <= 0.0 {
                    return Err(Error::Config("adaptive tolerances must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// A counterfactual query: observed point, factual parents, counterfactual
/// parents.
#[derive(Debug, Clone, PartialEq)]
pub struct CfQuery {
    pub x: Vec<f64>,
    pub pa: Vec<f64>,
    pub pa_star: Vec<f64>,
}

fn check_states(op: &'static str, x: &Array2<f64>, step: usize) -> Result<()> {
    if let Some((row, _)) = x
        .rows()
        .into_iter()
        .enumerate()
        .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite {
            op,
            detail: format!("row {row} at step {step}"),
        });
    }
    Ok(())
}

/// Evaluates the field in integration time: forward uses `t` directly,
/// backward evaluates `−v` at `t = 1 − s`.
fn directed_eval(
    field: &impl FieldEval,
    x: &Array2<f64>,
    pa: &Array2<f64>,
    s: f64,
    direction: Direction,
) -> Result<Array2<f64>> {
    let m = x.nrows();
    match direction {
        Direction::Forward => field.eval_batch(x, pa, &vec![s; m]),
        Direction::Backward => Ok(field.eval_batch(x, pa, &vec![1.0 - s; m])?.mapv(|v| -v)),
    }
}

fn integrate_euler(
    field: &impl FieldEval,
    x0: &Array2<f64>,
    pa: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    let steps = cfg.nfe;
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let s = k as f64 * h;
        let v = directed_eval(field, &x, pa, s, cfg.direction)?;
        x.scaled_add(h, &v);
        check_states("integrate", &x, k)?;
    }
    Ok(x)
}

fn integrate_rk4(
    field: &impl FieldEval,
    x0: &Array2<f64>,
    pa: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    let steps = cfg.nfe.div_ceil(4).max(1);
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let s = k as f64 * h;
        let k1 = directed_eval(field, &x, pa, s, cfg.direction)?;
        let k2 = directed_eval(field, &(&x + &(&k1 * (h / 2.0))), pa, s + h / 2.0, cfg.direction)?;
        let k3 = directed_eval(field, &(&x + &(&k2 * (h / 2.0))), pa, s + h / 2.0, cfg.direction)?;
        let k4 = directed_eval(field, &(&x + &(&k3 * h)), pa, s + h, cfg.direction)?;
        x.scaled_add(h / 6.0, &k1);
        x.scaled_add(h / 3.0, &k2);
        x.scaled_add(h / 3.0, &k3);
        x.scaled_add(h / 6.0, &k4);
        check_states("integrate", &x, k)?;
    }
    Ok(x)
}

// Dormand-Prince 4(5) coefficients.
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Per-row adaptive Dormand-Prince with a PI controller.
fn integrate_adaptive_row(
    field: &impl FieldEval,
    x0: Vec<f64>,
    pa_row: Vec<f64>,
    cfg: &OdeConfig,
) -> Result<Vec<f64>> {
    let d = x0.len();
    let eval = |x: &[f64], s: f64| -> Result<Vec<f64>> {
        let xa = Array2::from_shape_vec((1, d), x.to_vec()).expect("row");
        let pa = Array2::from_shape_vec((1, pa_row.len()), pa_row.clone()).expect("row");
        Ok(directed_eval(field, &xa, &pa, s, cfg.direction)?
            .row(0)
            .to_vec())
    };
    let mut x = x0;
    let mut s = 0.0f64;
    let mut h = 0.05f64;
    let mut err_prev: f64 = 1.0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; d]; 7];
    k[0] = eval(&x, 0.0)?;
    let max_steps = 100_000;
    for step in 0..max_steps {
        if s >= 1.0 {
            return Ok(x);
        }
        h = h.min(1.0 - s);
        for stage in 0..6 {
            let mut xs = x.clone();
            for (j, kj) in k.iter().enumerate().take(stage + 1) {
                let a = DP_A[stage][j];
                if a != 0.0 {
                    for c in 0..d {
                        xs[c] += h * a * kj[c];
                    }
                }
            }
            k[stage + 1] = eval(&xs, s + DP_C[stage] * h)?;
        }
        let mut x5 = x.clone();
        let mut err = 0.0f64;
        for c in 0..d {
            let mut inc5 = 0.0;
            let mut inc4 = 0.0;
            for j in 0..7 {
                inc5 += DP_B5[j] * k[j][c];
                inc4 += DP_B4[j] * k[j][c];
            }
            x5[c] = x[c] + h * inc5;
            let sc = cfg.atol + cfg.rtol * x[c].abs().max(x5[c].abs());
            let e = h * (inc5 - inc4) / sc;
            err += e * e;
        }
        err = (err / d as f64).sqrt();
        let err_clamped = err.max(1e-10);
        if err <= 1.0 {
            s += h;
            x = x5;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "integrate",
                    detail: format!("adaptive step {step}"),
                });
            }
            k[0] = k[6].clone(); // FSAL
            let fac = 0.9 * err_clamped.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            h *= fac.clamp(0.2, 5.0);
            err_prev = err_clamped;
        } else {
            h *= (0.9 * err_clamped.powf(-0.2)).clamp(0.2, 1.0);
            k[0] = eval(&x, s)?;
        }
    }
    Err(Error::NonFinite {
        op: "integrate",
        detail: "adaptive solver exceeded the step budget".into(),
    })
}

/// Integrates a batch of initial states from t=0 to t=1 (forward) or t=1 to
/// t=0 (backward, as forward integration of the negated field).
pub fn integrate_batch(
    field: &impl FieldEval,
    x0: &Array2<f64>,
    pa: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_states("integrate", x0, 0)?;
    match cfg.solver {
        Solver::Euler => integrate_euler(field, x0, pa, cfg),
        Solver::Rk4 => integrate_rk4(field, x0, pa, cfg),
        Solver::AdaptiveRk45 => {
            let mut out = Array2::zeros(x0.raw_dim());
            for i in 0..x0.nrows() {
                let row = integrate_adaptive_row(
                    field,
                    x0.row(i).to_vec(),
                    pa.row(i).to_vec(),
                    cfg,
                )?;
                for (c, v) in row.into_iter().enumerate() {
                    out[[i, c]] = v;
                }
            }
            Ok(out)
        }
    }
}

/// Single-state convenience wrapper.
pub fn integrate(
    field: &impl FieldEval,
    x0: &[f64],
    pa: &[f64],
    cfg: &OdeConfig,
) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, x0.len()), x0.to_vec()).expect("row");
    let p = Array2::from_shape_vec((1, pa.len()), pa.to_vec()).expect("row");
    Ok(integrate_batch(field, &x, &p, cfg)?.row(0).to_vec())
}

/// Abduction: backward solve from the observation at t=1 to the noise at
/// t=0.
pub fn abduct_batch(
    field: &impl FieldEval,
    x: &Array2<f64>,
    pa: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    integrate_batch(field, x, pa, &cfg.with_direction(Direction::Backward))
}

/// Prediction: forward solve from the noise under (counterfactual) parents.
pub fn predict_batch(
    field: &impl FieldEval,
    u: &Array2<f64>,
    pa_star: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    integrate_batch(field, u, pa_star, &cfg.with_direction(Direction::Forward))
}

pub fn abduct(field: &impl FieldEval, x: &[f64], pa: &[f64], cfg: &OdeConfig) -> Result<Vec<f64>> {
    integrate(field, x, pa, &cfg.with_direction(Direction::Backward))
}

pub fn predict(
    field: &impl FieldEval,
    u: &[f64],
    pa_star: &[f64],
    cfg: &OdeConfig,
) -> Result<Vec<f64>> {
    integrate(field, u, pa_star, &cfg.with_direction(Direction::Forward))
}

/// Abduct under the factual parents, predict under the counterfactual
/// ones. Both legs share the solver configuration.
pub fn counterfactual_batch(
    field: &impl FieldEval,
    x: &Array2<f64>,
    pa: &Array2<f64>,
    pa_star: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    let u = abduct_batch(field, x, pa, cfg)?;
    predict_batch(field, &u, pa_star, cfg)
}

pub fn counterfactual(field: &impl FieldEval, query: &CfQuery, cfg: &OdeConfig) -> Result<Vec<f64>> {
    let u = abduct(field, &query.x, &query.pa, cfg)?;
    predict(field, &u, &query.pa_star, cfg)
}

/// Alternates `T_{pa*}∘T⁻¹_{pa}` and `T_{pa}∘T⁻¹_{pa*}` `n_cycles` times,
/// returning the final factual-side points.
pub fn reverse_cycle_batch(
    field: &impl FieldEval,
    x: &Array2<f64>,
    pa: &Array2<f64>,
    pa_star: &Array2<f64>,
    n_cycles: usize,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    if n_cycles == 0 {
        return Err(Error::InvalidArgument {
            op: "reverse_cycle",
            msg: "n_cycles must be >= 1".into(),
        });
    }
    let mut cur = x.clone();
    for _ in 0..n_cycles {
        let forward = counterfactual_batch(field, &cur, pa, pa_star, cfg)?;
        cur = counterfactual_batch(field, &forward, pa_star, pa, cfg)?;
    }
    Ok(cur)
}

pub fn reverse_cycle(
    field: &impl FieldEval,
    query: &CfQuery,
    n_cycles: usize,
    cfg: &OdeConfig,
) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, query.x.len()), query.x.clone()).expect("row");
    let pa = Array2::from_shape_vec((1, query.pa.len()), query.pa.clone()).expect("row");
    let pa_star =
        Array2::from_shape_vec((1, query.pa_star.len()), query.pa_star.clone()).expect("row");
    Ok(reverse_cycle_batch(field, &x, &pa, &pa_star, n_cycles, cfg)?
        .row(0)
        .to_vec())
}

/// Frontdoor two-stage composition: abduct the mediator noise under `pa` and
/// the outcome noise under the observed mediator, predict the mediator at
/// `pa*`, then the outcome at the predicted mediator. Returns `(m*, x*)`.
pub fn frontdoor_counterfactual_batch(
    mediator_field: &impl FieldEval,
    outcome_field: &impl FieldEval,
    pa: &Array2<f64>,
    m_obs: &Array2<f64>,
    x: &Array2<f64>,
    pa_star: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let w = abduct_batch(mediator_field, m_obs, pa, cfg)?;
    let u = abduct_batch(outcome_field, x, m_obs, cfg)?;
    let m_star = predict_batch(mediator_field, &w, pa_star, cfg)?;
    let x_star = predict_batch(outcome_field, &u, &m_star, cfg)?;
    Ok((m_star, x_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField2D, FieldEval};

    /// Conditional analytic fixture: linear contraction toward a
    /// pa-dependent center.
    struct Contraction;

    impl FieldEval for Contraction {
        fn x_dim(&self) -> usize {
            2
        }
        fn pa_dim(&self) -> usize {
            1
        }
        fn eval_batch(&self, x: &Array2<f64>, pa: &Array2<f64>, t: &[f64]) -> crate::Result<Array2<f64>> {
            let mut v = Array2::zeros(x.raw_dim());
            for i in 0..x.nrows() {
                let c = pa[[i, 0]];
                v[[i, 0]] = -0.8 * (x[[i, 0]] - c) + 0.1 * t[i];
                v[[i, 1]] = 0.5 * (x[[i, 1]] - 0.3 * c);
            }
            Ok(v)
        }
    }

    struct Constant(f64, f64);

    impl FieldEval for Constant {
        fn x_dim(&self) -> usize {
            2
        }
        fn pa_dim(&self) -> usize {
            0
        }
        fn eval_batch(&self, x: &Array2<f64>, _pa: &Array2<f64>, _t: &[f64]) -> crate::Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(x.raw_dim(), |(_, c)| {
                if c == 0 {
                    self.0
                } else {
                    self.1
                }
            }))
        }
    }

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn constant_field_is_exact_for_euler_at_any_nfe() {
        let f = Constant(1.25, -0.5);
        for nfe in [1usize, 2, 7, 50] {
            let x1 = integrate(&f, &[0.0, 2.0], &[], &OdeConfig::euler(nfe)).unwrap();
            assert!((x1[0] - 1.25).abs() < 1e-12);
            assert!((x1[1] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let f = Constant(0.0, 0.0);
        for cfg in [OdeConfig::euler(3), OdeConfig::rk4(8), OdeConfig::adaptive(1e-5, 1e-5)] {
            let x1 = integrate(&f, &[0.7, -0.2], &[], &cfg).unwrap();
            assert_eq!(x1, vec![0.7, -0.2]);
        }
    }

    #[test]
    fn linear_field_euler_matches_compound_growth() {
        // v = x in 1-D (embedded in the first coordinate): Euler from 1.0
        // computes exactly the compound product (1 + 1/n)^n, which converges
        // to e with the known gap.
        let f = AnalyticField2D {
            f: |p: [f64; 2]| [p[0], 0.0],
        };
        let mut prev_gap = f64::INFINITY;
        for nfe in [2usize, 8, 32, 128, 512] {
            let x1 = integrate(&f, &[1.0, 0.0], &[], &OdeConfig::euler(nfe)).unwrap();
            let oracle = {
                let mut acc = 1.0f64;
                for _ in 0..nfe {
                    acc += acc / nfe as f64;
                }
                acc
            };
            assert!((x1[0] - oracle).abs() < 1e-12, "nfe {nfe}");
            let gap = (x1[0] - std::f64::consts::E).abs();
            assert!(gap < prev_gap, "error shrinks with nfe");
            prev_gap = gap;
        }
    }

    #[test]
    fn rk4_is_higher_order_than_euler() {
        let f = AnalyticField2D {
            f: |p: [f64; 2]| [p[0], 0.0],
        };
        let euler = integrate(&f, &[1.0, 0.0], &[], &OdeConfig::euler(64)).unwrap();
        let rk4 = integrate(&f, &[1.0, 0.0], &[], &OdeConfig::rk4(64)).unwrap();
        let e = std::f64::consts::E;
        assert!((rk4[0] - e).abs() < 1e-6);
        assert!((rk4[0] - e).abs() < (euler[0] - e).abs() / 100.0);
    }

    #[test]
    fn adaptive_hits_tolerance_on_linear_field() {
        let f = AnalyticField2D {
            f: |p: [f64; 2]| [p[0], -p[1]],
        };
        let cfg = OdeConfig::adaptive(1e-5, 1e-5);
        let x1 = integrate(&f, &[1.0, 1.0], &[], &cfg).unwrap();
        assert!((x1[0] - std::f64::consts::E).abs() < 1e-4);
        assert!((x1[1] - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn euler_and_rk4_converge_to_the_same_limit() {
        let f = Contraction;
        let x = row(&[2.0, -1.0]);
        let pa = row(&[1.3]);
        let e = integrate_batch(&f, &x, &pa, &OdeConfig::euler(4096)).unwrap();
        let r = integrate_batch(&f, &x, &pa, &OdeConfig::rk4(256)).unwrap();
        let gap = (0..2).map(|c| (e[[0, c]] - r[[0, c]]).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-4, "gap {gap}");
    }

    #[test]
    fn abduct_predict_round_trip_tightens_with_nfe() {
        let f = Contraction;
        let x = row(&[2.4, 0.7]);
        let pa = row(&[0.9]);
        let mut prev = f64::INFINITY;
        for nfe in [2usize, 10, 50, 250] {
            let cfg = OdeConfig::euler(nfe);
            let u = abduct_batch(&f, &x, &pa, &cfg).unwrap();
            let back = predict_batch(&f, &u, &pa, &cfg).unwrap();
            let err = (0..2).map(|c| (back[[0, c]] - x[[0, c]]).abs()).fold(0.0, f64::max);
            assert!(err < prev, "round-trip error {err} at nfe {nfe}");
            prev = err;
        }
        // First-order solver: residual error ~ O(1/nfe) at the last rung.
        assert!(prev < 5e-3, "round-trip error at nfe=250: {prev}");
    }

    #[test]
    fn field_free_reverse_cycle_is_identity() {
        let f = Constant(0.0, 0.0);
        let q = CfQuery {
            x: vec![0.4, -1.1],
            pa: vec![],
            pa_star: vec![],
        };
        let x_r = reverse_cycle(&f, &q, 1, &OdeConfig::euler(4)).unwrap();
        assert_eq!(x_r, q.x);
        let cf = counterfactual(&f, &q, &OdeConfig::euler(4)).unwrap();
        assert_eq!(cf, q.x);
    }

    #[test]
    fn identity_intervention_round_trip_within_solver_tolerance() {
        let f = Contraction;
        let q = CfQuery {
            x: vec![1.9, -0.4],
            pa: vec![0.6],
            pa_star: vec![0.6],
        };
        let cfg = OdeConfig::euler(250);
        let single_leg = {
            let u = abduct(&f, &q.x, &q.pa, &cfg).unwrap();
            let back = predict(&f, &u, &q.pa, &cfg).unwrap();
            (0..2).map(|c| (back[c] - q.x[c]).abs()).fold(0.0, f64::max)
        };
        let cf = counterfactual(&f, &q, &cfg).unwrap();
        let err = (0..2).map(|c| (cf[c] - q.x[c]).abs()).fold(0.0, f64::max);
        assert!(err <= 2.0 * single_leg.max(1e-9), "{err} vs leg {single_leg}");
    }

    #[test]
    fn non_finite_initial_state_rejected() {
        let f = Constant(0.0, 0.0);
        assert!(integrate(&f, &[f64::NAN, 0.0], &[], &OdeConfig::euler(2)).is_err());
    }

    #[test]
    fn field_free_frontdoor_is_identity() {
        let f = Constant(0.0, 0.0);
        let pa = row(&[1.0]);
        let m = row(&[0.8, 0.6]);
        let x = row(&[2.0, 3.0]);
        let pa_star = row(&[2.0]);
        // Both flows zero: m* = m, x* = x.
        struct ZeroField(usize, usize);
        impl FieldEval for ZeroField {
            fn x_dim(&self) -> usize {
                self.0
            }
            fn pa_dim(&self) -> usize {
                self.1
            }
            fn eval_batch(
                &self,
                x: &Array2<f64>,
                _pa: &Array2<f64>,
                _t: &[f64],
            ) -> crate::Result<Array2<f64>> {
                Ok(Array2::zeros(x.raw_dim()))
            }
        }
        let _ = f;
        let mediator = ZeroField(2, 1);
        let outcome = ZeroField(2, 2);
        let (m_star, x_star) =
            frontdoor_counterfactual_batch(&mediator, &outcome, &pa, &m, &x, &pa_star, &OdeConfig::euler(4))
                .unwrap();
        assert_eq!(m_star, m);
        assert_eq!(x_star, x);
    }
}
