//! Pairing prior draws with data draws.
//!
//! Three schemes: `independent` (draw-order pairing, standard flow
//! matching), `naive_ot` (batch assignment on ‖u − x‖² over jointly drawn
//! rows, which entangles the noise with the parents), and `markovian_ot`
//! (one parent value per batch, conditional data draws, assignment at fixed
//! parents — preserving `U ⫫ PA`).
//!
//! The assignment itself is solved exactly with an O(m³) shortest
//! augmenting path method; ties are broken toward the lexicographically
//! smallest optimal permutation so batches are reproducible.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dgp::{DgpSampler, Sample};
use crate::error::{Error, Result};

/// Source distribution for the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    UniformUnitBox,
    StandardGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub dim: usize,
}

impl PriorConfig {
    pub fn uniform(dim: usize) -> Self {
        Self {
            kind: PriorKind::UniformUnitBox,
            dim,
        }
    }

    pub fn gaussian(dim: usize) -> Self {
        Self {
            kind: PriorKind::StandardGaussian,
            dim,
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            PriorKind::UniformUnitBox => (0..self.dim).map(|_| rng.random::<f64>()).collect(),
            PriorKind::StandardGaussian => {
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                (0..self.dim).map(|_| normal.sample(rng)).collect()
            }
        }
    }

    pub fn draw_batch<R: Rng>(&self, m: usize, rng: &mut R) -> Array2<f64> {
        let mut u = Array2::zeros((m, self.dim));
        for i in 0..m {
            for (slot, v) in u.row_mut(i).iter_mut().zip(self.draw(rng)) {
                *slot = v;
            }
        }
        u
    }
}

/// Which pairing produced a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Independent,
    NaiveOt,
    MarkovianOt,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Independent => "independent",
            Scheme::NaiveOt => "naive_ot",
            Scheme::MarkovianOt => "markovian_ot",
        }
    }
}

/// A solved pairing: `u_row(i)` is matched to `x_row(assignment[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub assignment: Vec<usize>,
    pub cost: f64,
    pub scheme: Scheme,
}

/// Matched `(u, x, pa)` triples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub u: Array2<f64>,
    pub x: Array2<f64>,
    pub pa: Array2<f64>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which conditional a flow models over dataset rows: the conditioning
/// (parents) vector and the regression target are both slices of a
/// [`Sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowView {
    /// `x | pa` (markovian graph).
    XGivenPa,
    /// `x | (pa, z)` (backdoor adjustment).
    XGivenPaZ,
    /// `x | m` (frontdoor outcome).
    XGivenM,
    /// `m | pa` (frontdoor mediator).
    MGivenPa,
}

impl FlowView {
    pub fn pa_dim(self) -> usize {
        match self {
            FlowView::XGivenPa | FlowView::MGivenPa => 1,
            FlowView::XGivenPaZ | FlowView::XGivenM => 2,
        }
    }

    pub fn parents(self, s: &Sample) -> Vec<f64> {
        match self {
            FlowView::XGivenPa | FlowView::MGivenPa => vec![s.pa],
            FlowView::XGivenPaZ => vec![s.pa, s.z],
            FlowView::XGivenM => {
                let m = s.m.expect("XGivenM requires frontdoor samples");
                vec![m[0], m[1]]
            }
        }
    }

    pub fn target(self, s: &Sample) -> [f64; 2] {
        match self {
            FlowView::XGivenPa | FlowView::XGivenPaZ | FlowView::XGivenM => s.x,
            FlowView::MGivenPa => s.m.expect("MGivenPa requires frontdoor samples"),
        }
    }
}

fn squared_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plan_cost(u: &Array2<f64>, x: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| squared_dist(u.row(i), x.row(j)))
        .sum()
}

/// Exact minimum-cost assignment, O(m³): dense Jonker-Volgenant with
/// column reduction, reduction transfer and augmenting row reduction before
/// the shortest-augmenting-path phase. Ties are resolved toward the
/// lexicographically smallest optimal permutation.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let m = cost.nrows();
    if m == 0 || cost.ncols() != m {
        return Err(Error::InvalidArgument {
            op: "solve_assignment",
            msg: format!("cost matrix must be square and nonempty, got {:?}", cost.dim()),
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "solve_assignment",
            detail: "cost matrix".into(),
        });
    }
    let flat: Vec<f64> = cost.iter().copied().collect();
    let (row_to_col, u_dual, v_dual) = lapjv(&flat, m);
    canonicalize(cost, &u_dual, &v_dual, row_to_col)
}

const UNSET: usize = usize::MAX;

/// Dense LAP solver; returns the row-to-column assignment and the dual
/// potentials it certifies optimality with.
fn lapjv(flat: &[f64], m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut row_sol = vec![UNSET; m];
    let mut col_sol = vec![UNSET; m];
    let mut v = vec![0.0f64; m];
    let mut matches = vec![0usize; m];

    // Column reduction, scanning columns in reverse.
    for j in (0..m).rev() {
        let mut min = flat[j];
        let mut imin = 0usize;
        for i in 1..m {
            let c = flat[i * m + j];
            if c < min {
                min = c;
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            row_sol[imin] = j;
            col_sol[j] = imin;
        }
    }

    // Reduction transfer for singly-matched rows; collect free rows.
    let mut free: Vec<usize> = Vec::with_capacity(m);
    for i in 0..m {
        match matches[i] {
            0 => free.push(i),
            1 => {
                let j1 = row_sol[i];
                let row = &flat[i * m..(i + 1) * m];
                let mut min = f64::INFINITY;
                for j in 0..m {
                    if j != j1 {
                        let r = row[j] - v[j];
                        if r < min {
                            min = r;
                        }
                    }
                }
                v[j1] -= min;
            }
            _ => {}
        }
    }

    // Augmenting row reduction, two sweeps. The immediate-retry loop can
    // thrash on near-degenerate geometric costs, so each sweep's total work
    // is capped; rows still unmatched fall through to the exact
    // augmentation phase.
    for _ in 0..2 {
        let mut k = 0usize;
        let prv_n_free = free.len();
        let mut budget = 4 * prv_n_free + 16;
        let mut next_free: Vec<usize> = Vec::with_capacity(prv_n_free);
        while k < prv_n_free {
            if budget == 0 {
                next_free.extend_from_slice(&free[k..prv_n_free]);
                break;
            }
            budget -= 1;
            let i = free[k];
            k += 1;
            let row = &flat[i * m..(i + 1) * m];
            let mut umin = row[0] - v[0];
            let mut j1 = 0usize;
            let mut usubmin = f64::INFINITY;
            let mut j2 = UNSET;
            for j in 1..m {
                let h = row[j] - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        j2 = j1;
                        umin = h;
                        j1 = j;
                    }
                }
            }
            let mut i0 = col_sol[j1];
            if umin < usubmin {
                v[j1] -= usubmin - umin;
            } else if i0 != UNSET {
                j1 = j2;
                i0 = col_sol[j1];
            }
            row_sol[i] = j1;
            col_sol[j1] = i;
            if i0 != UNSET {
                if umin < usubmin {
                    // Retry the displaced row immediately.
                    k -= 1;
                    free[k] = i0;
                } else {
                    next_free.push(i0);
                }
            }
        }
        free = next_free;
    }

    // Shortest augmenting paths for the remaining free rows. The column
    // list is partitioned into scanned / to-scan-at-min / untouched.
    let mut d = vec![0.0f64; m];
    let mut pred = vec![0usize; m];
    let mut col_list: Vec<usize> = (0..m).collect();
    for &free_row in &free {
        let row = &flat[free_row * m..(free_row + 1) * m];
        for j in 0..m {
            d[j] = row[j] - v[j];
            pred[j] = free_row;
            col_list[j] = j;
        }
        let mut low = 0usize;
        let mut up = 0usize;
        let mut last = 0usize;
        let mut min = 0.0f64;
        let end_of_path;
        'path: loop {
            if up == low {
                last = low;
                min = d[col_list[up]];
                up += 1;
                for k in up..m {
                    let j = col_list[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        col_list[k] = col_list[up];
                        col_list[up] = j;
                        up += 1;
                    }
                }
                for k in low..up {
                    let j = col_list[k];
                    if col_sol[j] == UNSET {
                        end_of_path = j;
                        break 'path;
                    }
                }
            }
            let j1 = col_list[low];
            low += 1;
            let i = col_sol[j1];
            let i_row = &flat[i * m..(i + 1) * m];
            let h = i_row[j1] - v[j1] - min;
            let mut k = up;
            while k < m {
                let j = col_list[k];
                let v2 = i_row[j] - v[j] - h;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if col_sol[j] == UNSET {
                            end_of_path = j;
                            break 'path;
                        }
                        col_list[k] = col_list[up];
                        col_list[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
                k += 1;
            }
        }
        // Price update for scanned columns.
        for &j in col_list.iter().take(last) {
            v[j] += d[j] - min;
        }
        // Augment along the predecessor chain.
        let mut j = end_of_path;
        loop {
            let i = pred[j];
            col_sol[j] = i;
            std::mem::swap(&mut row_sol[i], &mut j);
            if i == free_row {
                break;
            }
        }
    }

    let u: Vec<f64> = (0..m)
        .map(|i| flat[i * m + row_sol[i]] - v[row_sol[i]])
        .collect();
    (row_sol, u, v)
}

/// Replaces the solver's assignment with the lexicographically smallest
/// perfect matching over tight edges (reduced cost zero at the optimal
/// duals). Any such matching is optimal by complementary slackness; when the
/// optimum is unique this is a no-op.
fn canonicalize(
    cost: &Array2<f64>,
    u_dual: &[f64],
    v_dual: &[f64],
    assignment: Vec<usize>,
) -> Result<Vec<usize>> {
    let m = cost.nrows();
    let scale = cost.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * scale;
    let mut tight: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut n_tight = 0usize;
    for i in 0..m {
        let mut cols = Vec::new();
        for j in 0..m {
            if assignment[i] == j || (cost[[i, j]] - u_dual[i] - v_dual[j]).abs() <= tol {
                cols.push(j);
            }
        }
        n_tight += cols.len();
        tight.push(cols);
    }
    if n_tight == m {
        return Ok(assignment); // unique optimum, nothing to break
    }

    // Greedy lexicographic selection with a matching feasibility check on
    // the remaining tight graph.
    let mut chosen = vec![usize::MAX; m];
    let mut used_col = vec![false; m];
    for i in 0..m {
        let mut fixed = false;
        for &j in &tight[i] {
            if used_col[j] {
                continue;
            }
            used_col[j] = true;
            if rows_matchable(&tight, i + 1, &used_col) {
                chosen[i] = j;
                fixed = true;
                break;
            }
            used_col[j] = false;
        }
        if !fixed {
            // The tight graph always admits the solver's matching, so this
            // is unreachable; fall back defensively.
            return Ok(assignment);
        }
    }
    Ok(chosen)
}

/// Kuhn's augmenting-path feasibility: can rows `from..` be perfectly
/// matched into unused columns of the tight graph?
fn rows_matchable(tight: &[Vec<usize>], from: usize, used_col: &[bool]) -> bool {
    let m = tight.len();
    if from >= m {
        return true;
    }
    let mut match_col = vec![usize::MAX; m];
    fn try_row(
        tight: &[Vec<usize>],
        i: usize,
        used_col: &[bool],
        seen: &mut [bool],
        match_col: &mut [usize],
    ) -> bool {
        for &j in &tight[i] {
            if used_col[j] || seen[j] {
                continue;
            }
            seen[j] = true;
            if match_col[j] == usize::MAX
                || try_row(tight, match_col[j], used_col, seen, match_col)
            {
                match_col[j] = i;
                return true;
            }
        }
        false
    }
    for i in from..m {
        let mut seen = vec![false; m];
        if !try_row(tight, i, used_col, &mut seen, &mut match_col) {
            return false;
        }
    }
    true
}

fn cost_matrix(u: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let m = u.nrows();
    Array2::from_shape_fn((m, m), |(i, j)| squared_dist(u.row(i), x.row(j)))
}

/// Where conditional draws for the Markovian coupling come from: the
/// simulator when the conditional is exactly sampleable online, otherwise a
/// dataset binned by a continuous conditioning angle.
pub enum ConditionalSource<'a> {
    /// Exact online draws from the generative process.
    Simulator(&'a DgpSampler<'a>),
    /// Rows grouped by mediator angle; batches take rows from one bin, so
    /// parents match up to the bin width.
    MediatorBins {
        rows: &'a [Sample],
        bins: &'a MediatorBins,
    },
}

/// Bin index over mediator angles for fixed-dataset Markovian coupling.
#[derive(Debug, Clone)]
pub struct MediatorBins {
    n_bins: usize,
    members: Vec<Vec<usize>>,
}

impl MediatorBins {
    pub fn build(rows: &[Sample], n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("mediator bin count must be > 0".into()));
        }
        let mut members = vec![Vec::new(); n_bins];
        for (idx, s) in rows.iter().enumerate() {
            let m = s.m.ok_or_else(|| {
                Error::Config("mediator bins require frontdoor samples".into())
            })?;
            let angle = m[1].atan2(m[0]).rem_euclid(std::f64::consts::TAU);
            let bin = ((angle / std::f64::consts::TAU) * n_bins as f64) as usize % n_bins;
            members[bin].push(idx);
        }
        Ok(Self { n_bins, members })
    }

    fn draw_bin<R: Rng>(&self, rng: &mut R) -> &[usize] {
        // Bins are sampled proportionally to occupancy by drawing a member
        // uniformly and using its bin.
        let total: usize = self.members.iter().map(Vec::len).sum();
        let mut k = (rng.random::<f64>() * total as f64) as usize % total;
        for bin in &self.members {
            if k < bin.len() {
                return bin;
            }
            k -= bin.len();
        }
        &self.members[self.n_bins - 1]
    }
}

/// The paper's coupling: one parent value per batch, `m` conditional data
/// draws at that value, exact assignment against `m` prior draws.
pub fn markovian_batch<R: Rng>(
    rng: &mut R,
    m: usize,
    source: &ConditionalSource,
    prior: &PriorConfig,
) -> Result<(PairedBatch, CouplingPlan)> {
    if m == 0 {
        return Err(Error::InvalidArgument {
            op: "markovian_batch",
            msg: "batch size must be >= 1".into(),
        });
    }
    let (x, pa) = match source {
        ConditionalSource::Simulator(sampler) => {
            let parents = sampler.draw_parents(rng);
            let mut x = Array2::zeros((m, prior.dim));
            for i in 0..m {
                let xi = sampler.sample_conditional(&parents, rng);
                x[[i, 0]] = xi[0];
                x[[i, 1]] = xi[1];
            }
            let pa = Array2::from_shape_fn((m, parents.len()), |(_, c)| parents[c]);
            (x, pa)
        }
        ConditionalSource::MediatorBins { rows, bins } => {
            let bin = bins.draw_bin(rng);
            if bin.is_empty() {
                return Err(Error::Config("empty mediator bin".into()));
            }
            let mut x = Array2::zeros((m, prior.dim));
            let mut pa = Array2::zeros((m, FlowView::XGivenM.pa_dim()));
            for i in 0..m {
                let row = &rows[bin[(rng.random::<f64>() * bin.len() as f64) as usize % bin.len()]];
                let t = FlowView::XGivenM.target(row);
                let p = FlowView::XGivenM.parents(row);
                x[[i, 0]] = t[0];
                x[[i, 1]] = t[1];
                pa[[i, 0]] = p[0];
                pa[[i, 1]] = p[1];
            }
            (x, pa)
        }
    };
    let u = prior.draw_batch(m, rng);
    let assignment = solve_assignment(&cost_matrix(&u, &x))?;
    let cost = plan_cost(&u, &x, &assignment);
    let mut x_perm = Array2::zeros(x.raw_dim());
    let mut pa_perm = Array2::zeros(pa.raw_dim());
    for (i, &j) in assignment.iter().enumerate() {
        x_perm.row_mut(i).assign(&x.row(j));
        pa_perm.row_mut(i).assign(&pa.row(j));
    }
    Ok((
        PairedBatch {
            u,
            x: x_perm,
            pa: pa_perm,
        },
        CouplingPlan {
            assignment,
            cost,
            scheme: Scheme::MarkovianOt,
        },
    ))
}

fn draw_rows<'a, R: Rng>(rng: &mut R, m: usize, rows: &'a [Sample]) -> Result<Vec<&'a Sample>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument {
            op: "coupling",
            msg: "dataset is empty".into(),
        });
    }
    Ok((0..m)
        .map(|_| &rows[(rng.random::<f64>() * rows.len() as f64) as usize % rows.len()])
        .collect())
}

/// Batch-OT over jointly drawn `(x, pa)` rows: the assignment minimizes
/// ‖u − x‖² only, and each `u` inherits the parents of its assigned row —
/// the Markovianity-violating baseline.
pub fn naive_batch<R: Rng>(
    rng: &mut R,
    m: usize,
    rows: &[Sample],
    view: FlowView,
    prior: &PriorConfig,
) -> Result<(PairedBatch, CouplingPlan)> {
    let drawn = draw_rows(rng, m, rows)?;
    let mut x = Array2::zeros((m, prior.dim));
    let mut pa = Array2::zeros((m, view.pa_dim()));
    for (i, s) in drawn.iter().enumerate() {
        let t = view.target(s);
        x[[i, 0]] = t[0];
        x[[i, 1]] = t[1];
        for (slot, v) in pa.row_mut(i).iter_mut().zip(view.parents(s)) {
            *slot = v;
        }
    }
    let u = prior.draw_batch(m, rng);
    let assignment = solve_assignment(&cost_matrix(&u, &x))?;
    let cost = plan_cost(&u, &x, &assignment);
    let mut x_perm = Array2::zeros(x.raw_dim());
    let mut pa_perm = Array2::zeros(pa.raw_dim());
    for (i, &j) in assignment.iter().enumerate() {
        x_perm.row_mut(i).assign(&x.row(j));
        pa_perm.row_mut(i).assign(&pa.row(j));
    }
    Ok((
        PairedBatch {
            u,
            x: x_perm,
            pa: pa_perm,
        },
        CouplingPlan {
            assignment,
            cost,
            scheme: Scheme::NaiveOt,
        },
    ))
}

/// Independent pairing in draw order (standard flow matching).
pub fn independent_batch<R: Rng>(
    rng: &mut R,
    m: usize,
    rows: &[Sample],
    view: FlowView,
    prior: &PriorConfig,
) -> Result<(PairedBatch, CouplingPlan)> {
    let drawn = draw_rows(rng, m, rows)?;
    let mut x = Array2::zeros((m, prior.dim));
    let mut pa = Array2::zeros((m, view.pa_dim()));
    for (i, s) in drawn.iter().enumerate() {
        let t = view.target(s);
        x[[i, 0]] = t[0];
        x[[i, 1]] = t[1];
        for (slot, v) in pa.row_mut(i).iter_mut().zip(view.parents(s)) {
            *slot = v;
        }
    }
    let u = prior.draw_batch(m, rng);
    let assignment: Vec<usize> = (0..m).collect();
    let cost = plan_cost(&u, &x, &assignment);
    Ok((
        PairedBatch { u, x, pa },
        CouplingPlan {
            assignment,
            cost,
            scheme: Scheme::Independent,
        },
    ))
}
