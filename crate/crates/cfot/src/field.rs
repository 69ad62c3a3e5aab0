//! Conditional vector-field parameterisations `v_t(x; pa, θ)` and curl
//! diagnostics.
//!
//! Two kinds share one network substrate: `Direct` reads the velocity off
//! the network output, `Energy` defines a scalar energy as the mean of the
//! network output and takes its gradient w.r.t. `x`, which is curl-free by
//! construction. Conditioning is the raw concatenation `(x, pa, t)`; an
//! optional periodic encoding maps each parent angle to `(sin, cos)`.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{backward_input, forward, grad_energy_params, Activation, NetworkSpec, Params, Wants};

/// How the velocity is read out of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Direct,
    Energy,
}

impl FieldKind {
    pub fn label(self) -> &'static str {
        match self {
            FieldKind::Direct => "direct",
            FieldKind::Energy => "energy",
        }
    }
}

/// Parent conditioning encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaEncoding {
    /// Raw concatenation, matching the stated input dimension
    /// `dim(X) + dim(PA) + 1`.
    #[default]
    Raw,
    /// Each parent angle contributes `(sin, cos)`. Off for reproduction runs.
    Periodic,
}

/// Anything that can evaluate a conditional velocity field on a batch.
pub trait FieldEval: Sync {
    fn x_dim(&self) -> usize;
    fn pa_dim(&self) -> usize;
    /// `x`: (m × x_dim), `pa`: (m × pa_dim), `t`: per-row times in [0, 1].
    fn eval_batch(&self, x: &Array2<f64>, pa: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>>;
}

/// A parameterised conditional vector field.
#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    pub kind: FieldKind,
    pub params: Params,
    pub pa_dim: usize,
    pub pa_encoding: PaEncoding,
}

impl VectorFieldModel {
    /// Network spec for given dimensions: input is `(x, enc(pa), t)`.
    pub fn spec_for(
        x_dim: usize,
        pa_dim: usize,
        pa_encoding: PaEncoding,
        hidden_dim: usize,
        n_blocks: usize,
    ) -> Result<NetworkSpec> {
        let enc = match pa_encoding {
            PaEncoding::Raw => pa_dim,
            PaEncoding::Periodic => 2 * pa_dim,
        };
        NetworkSpec::new(x_dim + enc + 1, hidden_dim, n_blocks, x_dim)
    }

    pub fn init<R: Rng>(
        kind: FieldKind,
        x_dim: usize,
        pa_dim: usize,
        hidden_dim: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::spec_for(x_dim, pa_dim, PaEncoding::Raw, hidden_dim, n_blocks)?;
        Ok(Self {
            kind,
            params: Params::init(spec, rng),
            pa_dim,
            pa_encoding: PaEncoding::Raw,
        })
    }

    pub fn from_params(kind: FieldKind, params: Params, pa_dim: usize) -> Self {
        Self {
            kind,
            params,
            pa_dim,
            pa_encoding: PaEncoding::Raw,
        }
    }

    /// Same model with different parameters (e.g. EMA weights).
    pub fn with_params(&self, params: Params) -> Self {
        Self {
            kind: self.kind,
            params,
            pa_dim: self.pa_dim,
            pa_encoding: self.pa_encoding,
        }
    }

    /// Concatenates `(x, enc(pa), t)` rows into the network input.
    pub fn encode_input(&self, x: &Array2<f64>, pa: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let m = x.nrows();
        if pa.nrows() != m || t.len() != m || pa.ncols() != self.pa_dim {
            return Err(Error::ShapeMismatch {
                op: "field::encode_input",
                expected: format!("{m} rows, pa_dim {}", self.pa_dim),
                got: format!("pa {:?}, t {}", pa.dim(), t.len()),
            });
        }
        let spec = self.params.spec;
        let x_dim = spec.output_dim;
        let mut input = Array2::zeros((m, spec.input_dim));
        for i in 0..m {
            let mut row = input.row_mut(i);
            for (slot, &v) in row.iter_mut().zip(x.row(i)) {
                *slot = v;
            }
            match self.pa_encoding {
                PaEncoding::Raw => {
                    for (j, &p) in pa.row(i).iter().enumerate() {
                        row[x_dim + j] = p;
                    }
                }
                PaEncoding::Periodic => {
                    for (j, &p) in pa.row(i).iter().enumerate() {
                        row[x_dim + 2 * j] = p.sin();
                        row[x_dim + 2 * j + 1] = p.cos();
                    }
                }
            }
            row[spec.input_dim - 1] = t[i];
        }
        Ok(input)
    }

    fn velocity_from_input(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let spec = self.params.spec;
        let (output, tape) = forward(&self.params, input, Activation::Silu)?;
        let v = match self.kind {
            FieldKind::Direct => output,
            FieldKind::Energy => {
                // v = ∇_x E with E the per-row mean of the network output.
                let cot =
                    Array2::from_elem((input.nrows(), spec.output_dim), 1.0 / spec.output_dim as f64);
                let dinput = backward_input(&self.params, &tape, &cot)?;
                dinput.slice(ndarray::s![.., ..spec.output_dim]).to_owned()
            }
        };
        if let Some((row, _)) = v
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                op: "field::eval",
                detail: format!("row {row}"),
            });
        }
        Ok(v)
    }

    /// Flow-matching regression: loss and parameter gradients of
    /// `mean_rows ‖v(x_row; pa_row, t_row) − target_row‖²`.
    ///
    /// Exact for both kinds; the energy kind differentiates through its own
    /// input gradient with a forward-over-reverse pass.
    pub fn regression_grads(
        &self,
        x: &Array2<f64>,
        pa: &Array2<f64>,
        t: &[f64],
        target: &Array2<f64>,
    ) -> Result<(f64, Params)> {
        let m = x.nrows();
        let spec = self.params.spec;
        let input = self.encode_input(x, pa, t)?;
        let (output, tape) = forward(&self.params, &input, Activation::Silu)?;
        match self.kind {
            FieldKind::Direct => {
                let residual = &output - target;
                let loss = residual.iter().map(|r| r * r).sum::<f64>() / m as f64;
                check_loss(loss, &residual)?;
                let cot = residual.mapv(|r| 2.0 * r / m as f64);
                let grads = crate::nn::backward(&self.params, &tape, &cot, Wants::ParamsOnly)?
                    .params
                    .expect("params requested");
                Ok((loss, grads))
            }
            FieldKind::Energy => {
                let cot =
                    Array2::from_elem((m, spec.output_dim), 1.0 / spec.output_dim as f64);
                let dinput = backward_input(&self.params, &tape, &cot)?;
                let v = dinput.slice(ndarray::s![.., ..spec.output_dim]);
                let residual = &v - target;
                let loss = residual.iter().map(|r| r * r).sum::<f64>() / m as f64;
                check_loss(loss, &residual)?;
                // Direction rows: ∂loss/∂v in the x slots, zero elsewhere.
                let mut dir = Array2::zeros((m, spec.input_dim));
                for i in 0..m {
                    for j in 0..spec.output_dim {
                        dir[[i, j]] = 2.0 * residual[[i, j]] / m as f64;
                    }
                }
                let grads = grad_energy_params(&self.params, &tape, &dir)?;
                Ok((loss, grads))
            }
        }
    }
}

fn check_loss(
    loss: f64,
    residual: &ndarray::ArrayBase<impl ndarray::Data<Elem = f64>, ndarray::Ix2>,
) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let row = residual
        .rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
        .unwrap_or(0);
    Err(Error::NonFinite {
        op: "field::regression",
        detail: format!("pair {row}"),
    })
}

impl FieldEval for VectorFieldModel {
    fn x_dim(&self) -> usize {
        self.params.spec.output_dim
    }

    fn pa_dim(&self) -> usize {
        self.pa_dim
    }

    fn eval_batch(&self, x: &Array2<f64>, pa: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let input = self.encode_input(x, pa, t)?;
        self.velocity_from_input(&input)
    }
}

/// Convenience single-point evaluation.
pub fn eval_field(model: &VectorFieldModel, x: &[f64], pa: &[f64], t: f64) -> Result<Vec<f64>> {
    let x_arr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let pa_arr = Array2::from_shape_vec((1, pa.len()), pa.to_vec()).expect("row vector");
    let v = model.eval_batch(&x_arr, &pa_arr, &[t])?;
    Ok(v.row(0).to_vec())
}

/// Rectangular evaluation lattice for 2-D fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x0_min: f64,
    pub x0_max: f64,
    pub x1_min: f64,
    pub x1_max: f64,
    pub n0: usize,
    pub n1: usize,
}

impl GridSpec {
    pub fn square(min: f64, max: f64, n: usize) -> Self {
        Self {
            x0_min: min,
            x0_max: max,
            x1_min: min,
            x1_max: max,
            n0: n,
            n1: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 < 3 || self.n1 < 3 || self.x0_max <= self.x0_min || self.x1_max <= self.x1_min {
            return Err(Error::InvalidArgument {
                op: "curl",
                msg: "grid must be strictly increasing with at least 3 points per axis".into(),
            });
        }
        Ok(())
    }

    pub fn h0(&self) -> f64 {
        (self.x0_max - self.x0_min) / (self.n0 - 1) as f64
    }

    pub fn h1(&self) -> f64 {
        (self.x1_max - self.x1_min) / (self.n1 - 1) as f64
    }

    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.x0_min + i as f64 * self.h0(),
            self.x1_min + j as f64 * self.h1(),
        ]
    }

    fn lattice(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.n0 * self.n1, 2));
        for i in 0..self.n0 {
            for j in 0..self.n1 {
                let p = self.point(i, j);
                x[[i * self.n1 + j, 0]] = p[0];
                x[[i * self.n1 + j, 1]] = p[1];
            }
        }
        x
    }
}

/// Scalar curl `∂v1/∂x0 − ∂v0/∂x1` sampled on a lattice.
#[derive(Debug, Clone)]
pub struct CurlMap {
    pub grid: GridSpec,
    /// Row-major `(n0 × n1)`, indexed `[i, j]` ↔ `(x0_i, x1_j)`.
    pub values: Array2<f64>,
    pub t: f64,
    pub pa: Vec<f64>,
}

impl CurlMap {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Maximum over interior lattice points, where the stencil is central
    /// differences with O(h²) truncation (the boundary uses one-sided
    /// differences, which are only O(h)).
    pub fn max_abs_interior(&self) -> f64 {
        let mut acc: f64 = 0.0;
        for i in 1..self.grid.n0.saturating_sub(1) {
            for j in 1..self.grid.n1.saturating_sub(1) {
                acc = acc.max(self.values[[i, j]].abs());
            }
        }
        acc
    }

    /// `x0,x1,curl` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "x0,x1,curl")?;
        for i in 0..self.grid.n0 {
            for j in 0..self.grid.n1 {
                let p = self.grid.point(i, j);
                writeln!(out, "{:.16e},{:.16e},{:.16e}", p[0], p[1], self.values[[i, j]])?;
            }
        }
        Ok(())
    }

    /// Sidecar `key=value` metadata.
    pub fn write_meta<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "t={:.16e}", self.t)?;
        for (i, p) in self.pa.iter().enumerate() {
            writeln!(out, "pa{i}={p:.16e}")?;
        }
        writeln!(out, "x0_min={:.16e}", self.grid.x0_min)?;
        writeln!(out, "x0_max={:.16e}", self.grid.x0_max)?;
        writeln!(out, "x1_min={:.16e}", self.grid.x1_min)?;
        writeln!(out, "x1_max={:.16e}", self.grid.x1_max)?;
        writeln!(out, "h0={:.16e}", self.grid.h0())?;
        writeln!(out, "h1={:.16e}", self.grid.h1())?;
        Ok(())
    }
}

/// Samples the field on the lattice and differences it: central differences
/// inside, one-sided at the boundary.
pub fn curl(field: &impl FieldEval, grid: GridSpec, pa: &[f64], t: f64) -> Result<CurlMap> {
    grid.validate()?;
    if field.x_dim() != 2 {
        return Err(Error::InvalidArgument {
            op: "curl",
            msg: format!("curl is defined for 2-D fields, got dim {}", field.x_dim()),
        });
    }
    let (n0, n1) = (grid.n0, grid.n1);
    let m = n0 * n1;
    let x = grid.lattice();
    let pa_rows = Array2::from_shape_fn((m, pa.len()), |(_, c)| pa[c]);
    let v = field.eval_batch(&x, &pa_rows, &vec![t; m])?;

    let at = |i: usize, j: usize, c: usize| v[[i * n1 + j, c]];
    let h0 = grid.h0();
    let h1 = grid.h1();
    let mut values = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            let dv1_dx0 = if i == 0 {
                (at(1, j, 1) - at(0, j, 1)) / h0
            } else if i == n0 - 1 {
                (at(n0 - 1, j, 1) - at(n0 - 2, j, 1)) / h0
            } else {
                (at(i + 1, j, 1) - at(i - 1, j, 1)) / (2.0 * h0)
            };
            let dv0_dx1 = if j == 0 {
                (at(i, 1, 0) - at(i, 0, 0)) / h1
            } else if j == n1 - 1 {
                (at(i, n1 - 1, 0) - at(i, n1 - 2, 0)) / h1
            } else {
                (at(i, j + 1, 0) - at(i, j - 1, 0)) / (2.0 * h1)
            };
            values[[i, j]] = dv1_dx0 - dv0_dx1;
        }
    }
    Ok(CurlMap {
        grid,
        values,
        t,
        pa: pa.to_vec(),
    })
}

/// Analytic 2-D field defined by a closure, for fixtures and diagnostics.
pub struct AnalyticField2D<F: Fn([f64; 2]) -> [f64; 2] + Sync> {
    pub f: F,
}

impl<F: Fn([f64; 2]) -> [f64; 2] + Sync> FieldEval for AnalyticField2D<F> {
    fn x_dim(&self) -> usize {
        2
    }

    fn pa_dim(&self) -> usize {
        0
    }

    fn eval_batch(&self, x: &Array2<f64>, _pa: &Array2<f64>, _t: &[f64]) -> Result<Array2<f64>> {
        let mut v = Array2::zeros((x.nrows(), 2));
        for (i, row) in x.rows().into_iter().enumerate() {
            let out = (self.f)([row[0], row[1]]);
            v[[i, 0]] = out[0];
            v[[i, 1]] = out[1];
        }
        Ok(v)
    }
}

fn max_norm(v: &Array2<f64>) -> f64 {
    v.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Finite-difference truncation floor for gradient fields.
///
/// The discrete (interior) curl of an exact gradient field is pure
/// truncation error, `O(h²·‖D³E‖)`; a rotational field's curl does not
/// vanish with `h`. The floor is calibrated on an analytic energy fixture
/// `E = sin(x0)·cos(x1)` evaluated on the same grid, rescaled to the
/// subject field's magnitude, times a safety factor for curvature mismatch.
/// Compare against [`CurlMap::max_abs_interior`].
pub fn gradient_field_noise_floor(
    field: &impl FieldEval,
    grid: GridSpec,
    pa: &[f64],
    t: f64,
) -> Result<f64> {
    const SAFETY: f64 = 50.0;
    grid.validate()?;
    let fixture = AnalyticField2D {
        // ∇(sin x0 · cos x1)
        f: |p: [f64; 2]| [p[0].cos() * p[1].cos(), -p[0].sin() * p[1].sin()],
    };
    let fixture_curl = curl(&fixture, grid, &[], t)?.max_abs_interior();

    let m = grid.n0 * grid.n1;
    let x = grid.lattice();
    let fixture_scale = max_norm(&fixture.eval_batch(&x, &Array2::zeros((m, 0)), &vec![t; m])?);
    let pa_rows = Array2::from_shape_fn((m, pa.len()), |(_, c)| pa[c]);
    let subject_scale = max_norm(&field.eval_batch(&x, &pa_rows, &vec![t; m])?);

    Ok(SAFETY * fixture_curl * (subject_scale / fixture_scale).max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use rand::Rng;

    fn model(kind: FieldKind, seed_idx: u64) -> VectorFieldModel {
        let mut rng = substream(13, Domain::Init, seed_idx);
        VectorFieldModel::init(kind, 2, 1, 16, 2, &mut rng).unwrap()
    }

    #[test]
    fn direct_kind_is_network_output() {
        let m = model(FieldKind::Direct, 0);
        let x = Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap();
        let pa = Array2::from_shape_vec((1, 1), vec![1.2]).unwrap();
        let input = m.encode_input(&x, &pa, &[0.7]).unwrap();
        assert_eq!(input.as_slice().unwrap(), &[0.3, -0.4, 1.2, 0.7]);
        let (y, _) = forward(&m.params, &input, Activation::Silu).unwrap();
        let v = m.eval_batch(&x, &pa, &[0.7]).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn energy_of_constant_network_is_zero_field() {
        let mut m = model(FieldKind::Energy, 1);
        let spec = m.params.spec;
        m.params.data[spec.head_w()].fill(0.0);
        let x = Array2::from_shape_vec((2, 2), vec![0.3, -0.4, 1.0, 2.0]).unwrap();
        let pa = Array2::from_shape_vec((2, 1), vec![1.2, 0.1]).unwrap();
        let v = m.eval_batch(&x, &pa, &[0.5, 0.5]).unwrap();
        assert!(v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_field_matches_finite_differences_of_energy() {
        let m = model(FieldKind::Energy, 2);
        let mut rng = substream(13, Domain::Probe, 3);
        let energy = |x: &[f64], pa: &[f64], t: f64| -> f64 {
            let xa = Array2::from_shape_vec((1, 2), x.to_vec()).unwrap();
            let pa_a = Array2::from_shape_vec((1, 1), pa.to_vec()).unwrap();
            let input = m.encode_input(&xa, &pa_a, &[t]).unwrap();
            let (y, _) = forward(&m.params, &input, Activation::Silu).unwrap();
            y.row(0).sum() / 2.0
        };
        for _ in 0..10 {
            let x = [2.0 * rng.random::<f64>(), 2.0 * rng.random::<f64>()];
            let pa = [rng.random::<f64>() * 6.0];
            let t = rng.random::<f64>();
            let v = eval_field(&m, &x, &pa, t).unwrap();
            let h = 1e-5;
            for c in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (energy(&xp, &pa, t) - energy(&xm, &pa, t)) / (2.0 * h);
                let rel = (v[c] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "coord {c}: {} vs {fd}", v[c]);
            }
        }
    }

    #[test]
    fn non_finite_params_detected() {
        let mut m = model(FieldKind::Direct, 4);
        let spec = m.params.spec;
        let head = spec.head_b();
        m.params.data[head].fill(f64::NAN);
        let x = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let pa = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        assert!(m.eval_batch(&x, &pa, &[0.0]).is_err());
    }

    #[test]
    fn rotation_field_curl_is_minus_two() {
        let f = AnalyticField2D {
            f: |p: [f64; 2]| [p[1], -p[0]],
        };
        let map = curl(&f, GridSpec::square(-2.0, 2.0, 50), &[], 0.0).unwrap();
        for &v in map.values.iter() {
            assert!((v + 2.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn gradient_field_curl_is_zero() {
        let f = AnalyticField2D { f: |p: [f64; 2]| p };
        let map = curl(&f, GridSpec::square(-2.0, 2.0, 50), &[], 0.0).unwrap();
        assert!(map.max_abs() < 1e-8);
    }

    #[test]
    fn degenerate_grid_rejected() {
        let f = AnalyticField2D { f: |p: [f64; 2]| p };
        assert!(curl(&f, GridSpec::square(2.0, 2.0, 50), &[], 0.0).is_err());
        assert!(curl(&f, GridSpec::square(-1.0, 1.0, 2), &[], 0.0).is_err());
    }

    #[test]
    fn energy_model_curl_shrinks_quadratically_with_h() {
        // The discrete curl of a gradient field is truncation error O(h²):
        // halving h must shrink it by roughly 4. A direct field has real
        // curl that does not shrink.
        let em = model(FieldKind::Energy, 5);
        let coarse = curl(&em, GridSpec::square(0.5, 3.5, 31), &[1.0], 0.5)
            .unwrap()
            .max_abs_interior();
        let fine = curl(&em, GridSpec::square(0.5, 3.5, 61), &[1.0], 0.5)
            .unwrap()
            .max_abs_interior();
        assert!(fine < coarse / 2.5, "coarse {coarse} fine {fine}");

        let dm = model(FieldKind::Direct, 6);
        let coarse_d = curl(&dm, GridSpec::square(0.5, 3.5, 31), &[1.0], 0.5)
            .unwrap()
            .max_abs_interior();
        let fine_d = curl(&dm, GridSpec::square(0.5, 3.5, 61), &[1.0], 0.5)
            .unwrap()
            .max_abs_interior();
        assert!(
            fine_d > coarse_d / 2.0,
            "direct curl is not a discretisation artifact"
        );
    }

    #[test]
    fn fresh_models_have_bounded_field_magnitude() {
        for (kind, idx) in [(FieldKind::Direct, 7), (FieldKind::Energy, 8)] {
            let mut rng = substream(21, Domain::Init, idx);
            let m = VectorFieldModel::init(kind, 2, 1, 256, 3, &mut rng).unwrap();
            let mut probe = substream(21, Domain::Probe, idx);
            let n = 200;
            let x = Array2::from_shape_fn((n, 2), |_| probe.random::<f64>() * 12.0);
            let pa = Array2::from_shape_fn((n, 1), |_| probe.random::<f64>() * 6.28);
            let t: Vec<f64> = (0..n).map(|_| probe.random::<f64>()).collect();
            let v = m.eval_batch(&x, &pa, &t).unwrap();
            for row in v.rows() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm <= 10.0, "{kind:?}: ‖v‖ = {norm}");
            }
        }
    }

    #[test]
    fn regression_grads_match_finite_differences_direct() {
        let m = model(FieldKind::Direct, 9);
        let mut rng = substream(13, Domain::Probe, 10);
        let n = 4;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0);
        let pa = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>() * 6.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let target = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() - 0.5);
        let (_, grads) = m.regression_grads(&x, &pa, &t, &target).unwrap();

        let loss_at = |p: &Params| {
            let mm = m.with_params(p.clone());
            let v = mm.eval_batch(&x, &pa, &t).unwrap();
            (&v - &target).iter().map(|r| r * r).sum::<f64>() / n as f64
        };
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let idx = (rng.random::<f64>() * m.params.len() as f64) as usize % m.params.len();
            if grads.data[idx].abs() < 1e-6 {
                continue;
            }
            let mut pp = m.params.clone();
            let mut pm = m.params.clone();
            pp.data[idx] += h;
            pm.data[idx] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            let rel = (grads.data[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "param {idx}");
            checked += 1;
        }
    }

    #[test]
    fn regression_grads_match_finite_differences_energy() {
        let m = model(FieldKind::Energy, 11);
        let mut rng = substream(13, Domain::Probe, 12);
        let n = 3;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0);
        let pa = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>() * 6.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let target = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() - 0.5);
        let (_, grads) = m.regression_grads(&x, &pa, &t, &target).unwrap();

        let loss_at = |p: &Params| {
            let mm = m.with_params(p.clone());
            let v = mm.eval_batch(&x, &pa, &t).unwrap();
            (&v - &target).iter().map(|r| r * r).sum::<f64>() / n as f64
        };
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let idx = (rng.random::<f64>() * m.params.len() as f64) as usize % m.params.len();
            if grads.data[idx].abs() < 1e-5 {
                continue;
            }
            let mut pp = m.params.clone();
            let mut pm = m.params.clone();
            pp.data[idx] += h;
            pm.data[idx] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            let rel = (grads.data[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "param {idx}: {} vs {fd}", grads.data[idx]);
            checked += 1;
        }
    }
}
