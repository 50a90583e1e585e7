//! Roughness of a dichotomy under perturbation.
//!
//! The smallness quantity
//!
//! ```text
//! theta = sup_t int e^{-(alpha-beta)|t-tau|} b(tau) dtau,   b(t) = ||B(t)|| e^{eps|t|},
//! ```
//!
//! controls everything: when `K theta < 1` the perturbed evolution family
//! exists as the fixed point of a contraction, is built here by Picard
//! iteration on anchored pair tables, and its dichotomy is refitted from
//! the stable fixed point and the reflected (backward) construction.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dichotomy::{
    fit_from_samples, sample_pairs, DichotomyEstimate, DichotomyReport, EnvelopeSamples,
    ProjectionFamily, SampleConfig,
};
use crate::error::{Error, Result};
use crate::flows::{simpson_weights, LinearFlow, Propagator};
use crate::green::GreenFunction;
use crate::grid::{GridFunction, ScalarGridFunction, TimeGrid};
use crate::linalg;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum PerturbKind {
    Zero,
    ConstantScalar(f64),
    Diagonal(Vec<ScalarFn>),
    ScaledMatrix { profile: ScalarFn, matrix: DMatrix<f64>, matrix_norm: f64 },
}

/// A matrix-valued perturbation `B(t)` with its weighted bound
/// `b(t) = ||B(t)|| e^{eps |t|}`.
pub struct Perturbation {
    kind: PerturbKind,
    dim: usize,
    /// The eps of the governing dichotomy estimate.
    pub eps_weight: f64,
}

impl Perturbation {
    pub fn zero(dim: usize) -> Self {
        Perturbation { kind: PerturbKind::Zero, dim, eps_weight: 0.0 }
    }

    pub fn constant_scalar(dim: usize, delta: f64) -> Self {
        Perturbation { kind: PerturbKind::ConstantScalar(delta), dim, eps_weight: 0.0 }
    }

    pub fn diagonal(entries: Vec<ScalarFn>) -> Self {
        let dim = entries.len();
        Perturbation { kind: PerturbKind::Diagonal(entries), dim, eps_weight: 0.0 }
    }

    /// `B(t) = profile(t) * M` for a fixed matrix `M`.
    pub fn scaled_matrix(profile: ScalarFn, matrix: DMatrix<f64>) -> Self {
        let dim = matrix.nrows();
        let matrix_norm = linalg::l1_operator_norm(&matrix);
        Perturbation {
            kind: PerturbKind::ScaledMatrix { profile, matrix, matrix_norm },
            dim,
            eps_weight: 0.0,
        }
    }

    pub fn with_eps_weight(mut self, eps: f64) -> Self {
        self.eps_weight = eps;
        self
    }

    pub fn set_eps_weight(&mut self, eps: f64) {
        self.eps_weight = eps;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix_at(&self, t: f64) -> DMatrix<f64> {
        match &self.kind {
            PerturbKind::Zero => DMatrix::zeros(self.dim, self.dim),
            PerturbKind::ConstantScalar(d) => DMatrix::identity(self.dim, self.dim) * *d,
            PerturbKind::Diagonal(fs) => {
                DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    self.dim,
                    fs.iter().map(|f| f(t)),
                ))
            }
            PerturbKind::ScaledMatrix { profile, matrix, .. } => matrix * profile(t),
        }
    }

    /// `||B(t)||` in the induced l1 norm.
    pub fn norm_at(&self, t: f64) -> f64 {
        match &self.kind {
            PerturbKind::Zero => 0.0,
            PerturbKind::ConstantScalar(d) => d.abs(),
            PerturbKind::Diagonal(fs) => fs.iter().map(|f| f(t).abs()).fold(0.0, f64::max),
            PerturbKind::ScaledMatrix { profile, matrix_norm, .. } => {
                profile(t).abs() * matrix_norm
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, PerturbKind::Zero)
    }
}

/// Samples `b(t) = ||B(t)|| e^{eps|t|}` on the grid.
pub fn weighted_bound(b: &Perturbation, grid: &TimeGrid) -> Result<ScalarGridFunction> {
    let values: Vec<f64> = grid
        .nodes()
        .map(|t| b.norm_at(t) * (b.eps_weight * t.abs()).exp())
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("weighted perturbation bound"));
    }
    GridFunction::new(grid.clone(), values)
}

/// The weighted pair norm `sup ||M(t,s)|| e^{beta (t-s) - eps |s|}`.
#[derive(Debug, Clone, Copy)]
pub struct StarNorm {
    pub beta: f64,
    pub eps: f64,
}

impl StarNorm {
    pub fn new(beta: f64, eps: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Domain("star-norm beta must be positive".into()));
        }
        if eps < 0.0 {
            return Err(Error::Domain("star-norm eps must be nonnegative".into()));
        }
        Ok(StarNorm { beta, eps })
    }

    pub fn validate_against(&self, est: &DichotomyEstimate) -> Result<()> {
        if self.beta >= est.alpha {
            return Err(Error::Domain(format!(
                "beta = {} must lie below the dichotomy exponent alpha = {}",
                self.beta, est.alpha
            )));
        }
        Ok(())
    }

    pub fn weight(&self, t: f64, s: f64) -> f64 {
        (self.beta * (t - s) - self.eps * s.abs()).exp()
    }
}

/// Smallness report: the grid quadrature of theta, the analytic tail bound,
/// and the product with the caller-supplied `K`.
#[derive(Debug, Clone)]
pub struct ThetaReport {
    pub theta: f64,
    pub tail_bound: f64,
    pub k_theta: f64,
    pub passes: bool,
    /// Inner integral per grid node, for the theta profile table.
    pub profile: Vec<f64>,
}

/// Computes `theta = max_t int_grid e^{-(alpha-beta)|t-tau|} b(tau) dtau` by
/// exact one-panel recursions, with tails beyond the grid bounded from the
/// declared rate of `b`.
pub fn compute_theta(
    b: &ScalarGridFunction,
    alpha: f64,
    beta: f64,
    tail_rate: f64,
    k: f64,
) -> Result<ThetaReport> {
    if !(alpha > beta && beta > 0.0) {
        return Err(Error::Domain(format!(
            "theta needs alpha > beta > 0 (alpha = {alpha}, beta = {beta})"
        )));
    }
    if b.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("weighted bound b must be nonnegative".into()));
    }
    let c = alpha - beta;
    if tail_rate >= c {
        return Err(Error::DivergentTail { rate: tail_rate, kernel_rate: c });
    }
    let grid = b.grid();
    let n = grid.len();
    let h = grid.step();
    let decay = (-c * h).exp();
    let vals = b.values();

    // Left and right one-sided trapezoid sums of e^{-c|t - .|} b.
    let mut left = vec![0.0; n];
    for j in 1..n {
        left[j] = decay * (left[j - 1] + 0.5 * h * vals[j - 1]) + 0.5 * h * vals[j];
    }
    let mut right = vec![0.0; n];
    for j in (0..n - 1).rev() {
        right[j] = decay * (right[j + 1] + 0.5 * h * vals[j + 1]) + 0.5 * h * vals[j];
    }

    let b_lo = vals[0];
    let b_hi = vals[n - 1];
    let margin = c - tail_rate;
    let mut theta = 0.0f64;
    let mut tail_bound = 0.0f64;
    let mut profile = Vec::with_capacity(n);
    for j in 0..n {
        let inner = left[j] + right[j];
        profile.push(inner);
        theta = theta.max(inner);
        let t = grid.node(j);
        let tails = (b_lo * (-c * (t - grid.t_min())).exp()
            + b_hi * (-c * (grid.t_max() - t)).exp())
            / margin;
        tail_bound = tail_bound.max(tails);
    }
    let k_theta = k * (theta + tail_bound);
    Ok(ThetaReport { theta, tail_bound, k_theta, passes: k_theta < 1.0, profile })
}

/// Matrix-valued samples over pairs `(t, s)` with `s` restricted to anchor
/// nodes; the storage format of Picard iterates and of the perturbed family.
#[derive(Clone)]
pub struct PairTable {
    grid: TimeGrid,
    anchors: Vec<usize>,
    rows: Vec<Vec<DMatrix<f64>>>,
}

impl PairTable {
    /// Builds a table from a per-anchor row generator; each row must cover
    /// every node from its anchor to the grid end.
    pub fn from_fn(
        grid: &TimeGrid,
        anchors: &[usize],
        mut row: impl FnMut(usize) -> Result<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let rows = anchors.iter().map(|&a| row(a)).collect::<Result<Vec<_>>>()?;
        for (&a, r) in anchors.iter().zip(&rows) {
            if r.len() != grid.len() - a {
                return Err(Error::GridMismatch("pair-table row length".into()));
            }
        }
        Ok(PairTable { grid: grid.clone(), anchors: anchors.to_vec(), rows })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn anchor_times(&self) -> Vec<f64> {
        self.anchors.iter().map(|&a| self.grid.node(a)).collect()
    }

    /// Value at `(node t_idx, anchor node a_idx)`, `t_idx >= a_idx`.
    pub fn get(&self, t_idx: usize, a_idx: usize) -> Result<&DMatrix<f64>> {
        let pos = self
            .anchors
            .binary_search(&a_idx)
            .map_err(|_| Error::NotOnGrid(self.grid.node(a_idx)))?;
        if t_idx < a_idx {
            return Err(Error::BackwardEvaluation {
                t: self.grid.node(t_idx),
                s: self.grid.node(a_idx),
            });
        }
        Ok(&self.rows[pos][t_idx - a_idx])
    }

    pub fn star_norm(&self, norm: &StarNorm) -> f64 {
        let mut worst = 0.0f64;
        for (pos, &a) in self.anchors.iter().enumerate() {
            let s = self.grid.node(a);
            for (off, m) in self.rows[pos].iter().enumerate() {
                let t = self.grid.node(a + off);
                worst = worst.max(linalg::l1_operator_norm(m) * norm.weight(t, s));
            }
        }
        worst
    }

    fn star_norm_diff(&self, other: &PairTable, norm: &StarNorm) -> f64 {
        let mut worst = 0.0f64;
        for (pos, &a) in self.anchors.iter().enumerate() {
            let s = self.grid.node(a);
            for (off, m) in self.rows[pos].iter().enumerate() {
                let t = self.grid.node(a + off);
                let d = linalg::l1_operator_norm(&(m - &other.rows[pos][off]));
                worst = worst.max(d * norm.weight(t, s));
            }
        }
        worst
    }

    #[doc(hidden)]
    pub fn zero_entry(&mut self, anchor_pos: usize, offset: usize) {
        let m = &mut self.rows[anchor_pos][offset];
        *m = DMatrix::zeros(m.nrows(), m.ncols());
    }
}

/// Max of the weighted pair norm over a table; errors when empty.
pub fn star_norm_eval(table: &PairTable, norm: &StarNorm) -> Result<f64> {
    if table.rows.iter().all(|r| r.is_empty()) {
        return Err(Error::EmptySamples);
    }
    Ok(table.star_norm(norm))
}

/// Options for the Picard construction.
#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Anchor every n-th node; must divide the panel count.
    pub anchor_stride: usize,
    /// Declared rate of `b` beyond the grid, for truncation accounting.
    pub tail_rate: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-9, max_iter: 200, anchor_stride: 10, tail_rate: 0.0 }
    }
}

/// The perturbed evolution family on anchored grid pairs.
pub struct PerturbedFlow {
    grid: TimeGrid,
    anchors: Vec<usize>,
    /// Fixed point of the stable-branch operator (decaying solutions).
    stable: PairTable,
    /// The full perturbed family `U_B`.
    full: PairTable,
    pub iterations: usize,
    /// Star-norm deltas, stable phase then full phase.
    pub contraction_history: Vec<f64>,
    pub phase_lengths: (usize, usize),
    pub final_delta: f64,
    /// Truncation bound for the infinite upper limit of the fixed-point
    /// integral.
    pub tail_budget: f64,
}

impl PerturbedFlow {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn stable_table(&self) -> &PairTable {
        &self.stable
    }

    pub fn full_table(&self) -> &PairTable {
        &self.full
    }

    #[doc(hidden)]
    pub fn full_table_mut(&mut self) -> &mut PairTable {
        &mut self.full
    }

    /// Within-phase contraction ratios `delta_{k+1} / delta_k`.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        let (p1, _) = self.phase_lengths;
        let mut out = Vec::new();
        for (i, pair) in self.contraction_history.windows(2).enumerate() {
            if i + 1 == p1 {
                continue; // phase boundary
            }
            if pair[0] > 0.0 {
                out.push(pair[1] / pair[0]);
            }
        }
        out
    }
}

impl Propagator for PerturbedFlow {
    fn dim(&self) -> usize {
        self.full.rows.first().and_then(|r| r.first()).map_or(0, |m| m.nrows())
    }
    fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let t_idx = self.grid.index_of(t)?;
        let s_idx = self.grid.index_of(s)?;
        Ok(self.full.get(t_idx, s_idx)?.clone())
    }
}

pub(crate) fn anchor_indices(grid: &TimeGrid, stride: usize) -> Result<Vec<usize>> {
    let panels = grid.len() - 1;
    if stride == 0 {
        return Err(Error::Domain("anchor stride must be positive".into()));
    }
    // Round the stride down to a divisor so the anchors form a uniform grid.
    let mut stride = stride.min(panels);
    while !panels.is_multiple_of(stride) {
        stride -= 1;
    }
    Ok((0..=panels).step_by(stride).collect())
}

/// Builds the perturbed evolution family by Picard iteration.
///
/// Phase one iterates the stable-branch fixed-point operator
/// `X -> U P + int G B X`; phase two converts to the full family through
/// `U_B = U + int_s^t U B U_B`, iterated the same way. Both phases contract
/// at rate `K theta` in the star norm.
pub fn picard_perturbed(
    flow: &LinearFlow,
    est: &DichotomyEstimate,
    b: &Perturbation,
    grid: &TimeGrid,
    norm: StarNorm,
    theta: &ThetaReport,
    opts: PicardOptions,
) -> Result<PerturbedFlow> {
    est.validate()?;
    norm.validate_against(est)?;
    if !theta.passes {
        return Err(Error::SmallnessViolated { k_theta: theta.k_theta });
    }
    if b.dim() != flow.dim() {
        return Err(Error::DimensionMismatch { expected: flow.dim(), got: b.dim() });
    }
    if !est.projections.grid().same_nodes_as(grid) {
        return Err(Error::GridMismatch("estimate grid differs from iteration grid".into()));
    }

    let anchors = anchor_indices(grid, opts.anchor_stride)?;
    let n = flow.dim();
    let len = grid.len();
    // Three live tables plus sweep scratch; refuse absurd allocations.
    let entries: usize = anchors.iter().map(|&a| len - a).sum();
    let bytes = 4 * entries * n * n * 8;
    if bytes > 2_000_000_000 {
        return Err(Error::Domain(format!(
            "pair tables would need ~{} MB; increase anchor_stride or shrink the grid/state",
            bytes / 1_000_000
        )));
    }
    let green = GreenFunction::new(flow, est)?;
    let b_nodes: Vec<DMatrix<f64>> = grid.nodes().map(|t| b.matrix_at(t)).collect();
    let steps = flow.step_matrices(grid)?;

    // Base rows U(t, s_a) and U(t, s_a) P(s_a).
    let mut u_rows: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let mut row = Vec::with_capacity(len - a);
        row.push(DMatrix::identity(n, n));
        for j in a + 1..len {
            let prev: &DMatrix<f64> = &row[j - 1 - a];
            row.push(&steps[j - 1] * prev);
        }
        u_rows.push(row);
    }
    let up_rows: Vec<Vec<DMatrix<f64>>> = anchors
        .iter()
        .zip(&u_rows)
        .map(|(&a, row)| row.iter().map(|m| m * est.projections.p_at(a)).collect())
        .collect();

    let mut history = Vec::new();

    // Phase one: stable fixed point.
    let mut table = PairTable {
        grid: grid.clone(),
        anchors: anchors.clone(),
        rows: up_rows.clone(),
    };
    let mut iterations = 0usize;
    let mut converged = false;
    let mut forcing = vec![DMatrix::zeros(n, n); len];
    for _ in 0..opts.max_iter {
        iterations += 1;
        let mut next_rows = Vec::with_capacity(anchors.len());
        for (pos, &a) in anchors.iter().enumerate() {
            for j in 0..len {
                forcing[j] = if j >= a {
                    &b_nodes[j] * &table.rows[pos][j - a]
                } else {
                    DMatrix::zeros(n, n)
                };
            }
            let conv = green.convolve_matrices_from(&forcing, a)?;
            let row: Vec<DMatrix<f64>> =
                up_rows[pos].iter().zip(conv).map(|(base, c)| base + c).collect();
            next_rows.push(row);
        }
        let next = PairTable { grid: grid.clone(), anchors: anchors.clone(), rows: next_rows };
        let delta = next.star_norm_diff(&table, &norm);
        history.push(delta);
        table = next;
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            max_iter: opts.max_iter,
            last_delta: history.last().copied().unwrap_or(f64::NAN),
        });
    }
    let phase1 = history.len();
    let stable = table;

    // Truncation accounting for the infinite upper limit.
    let b_grid = weighted_bound(b, grid)?;
    let margin = est.alpha - norm.beta - opts.tail_rate;
    let tail_budget = if margin > 0.0 {
        est.k * stable.star_norm(&norm) * b_grid.values()[len - 1] / margin
    } else {
        f64::INFINITY
    };

    // Phase two: full family from the Volterra identity.
    let mut table = PairTable { grid: grid.clone(), anchors: anchors.clone(), rows: u_rows.clone() };
    let mut converged = false;
    let mut final_delta = 0.0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let mut next_rows = Vec::with_capacity(anchors.len());
        for (pos, &a) in anchors.iter().enumerate() {
            let row = &table.rows[pos];
            let h = grid.step();
            // W_j = int_s^t U(t,tau) B(tau) U_B(tau, s) dtau, trapezoid.
            let mut next_row = Vec::with_capacity(row.len());
            let mut w = DMatrix::zeros(n, n);
            next_row.push(u_rows[pos][0].clone());
            for j in a + 1..len {
                let prev = &b_nodes[j - 1] * &row[j - 1 - a];
                let cur = &b_nodes[j] * &row[j - a];
                w = &steps[j - 1] * (w + 0.5 * h * prev) + 0.5 * h * cur;
                next_row.push(&u_rows[pos][j - a] + &w);
            }
            next_rows.push(next_row);
        }
        let next = PairTable { grid: grid.clone(), anchors: anchors.clone(), rows: next_rows };
        let delta = next.star_norm_diff(&table, &norm);
        history.push(delta);
        table = next;
        if delta <= opts.tol {
            converged = true;
            final_delta = delta;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            max_iter: opts.max_iter,
            last_delta: history.last().copied().unwrap_or(f64::NAN),
        });
    }
    let phase2 = history.len() - phase1;

    Ok(PerturbedFlow {
        grid: grid.clone(),
        anchors,
        stable,
        full: table,
        iterations,
        contraction_history: history,
        phase_lengths: (phase1, phase2),
        final_delta,
        tail_budget,
    })
}

/// Residual of `U_B(t,s) = U(t,s) + int_s^t U(t,tau) B(tau) U_B(tau,s) dtau`
/// over a deterministic spread of anchors, with an independent Simpson
/// quadrature.
pub fn verify_perturbed_identity(
    pf: &PerturbedFlow,
    flow: &LinearFlow,
    b: &Perturbation,
    grid: &TimeGrid,
) -> Result<f64> {
    if !pf.grid.same_nodes_as(grid) {
        return Err(Error::GridMismatch("perturbed flow lives on a different grid".into()));
    }
    let steps = flow.step_matrices(grid)?;
    let n = flow.dim();
    let h = grid.step();
    let b_nodes: Vec<DMatrix<f64>> = grid.nodes().map(|t| b.matrix_at(t)).collect();
    let mut worst = 0.0f64;
    let anchor_stride = pf.anchors.len().div_ceil(16);
    for (pos, &a) in pf.anchors.iter().enumerate().step_by(anchor_stride) {
        let row = &pf.full.rows[pos];
        // u_row[i] = U(t_j, t_{a+i}), updated incrementally over j.
        let mut u_row: Vec<DMatrix<f64>> = vec![DMatrix::identity(n, n)];
        for j in a + 1..grid.len() {
            for m in u_row.iter_mut() {
                *m = &steps[j - 1] * &*m;
            }
            u_row.push(DMatrix::identity(n, n));
            let w = simpson_weights(j - a, h);
            let mut integral = DMatrix::zeros(n, n);
            for (i, wi) in w.iter().enumerate() {
                if *wi != 0.0 {
                    integral += *wi * (&u_row[i] * &b_nodes[a + i] * &row[i]);
                }
            }
            let defect = &row[j - a] - &u_row[0] - integral;
            worst = worst.max(linalg::l1_operator_norm(&defect));
        }
    }
    Ok(worst)
}

/// Cocycle defect of the perturbed family over anchored triples.
pub fn perturbed_cocycle_residual(pf: &PerturbedFlow) -> Result<f64> {
    let mut worst = 0.0f64;
    let anchors = &pf.anchors;
    for (i, &s) in anchors.iter().enumerate() {
        for &r in anchors[i..].iter() {
            let u_rs = pf.full.get(r, s)?;
            for &t in anchors.iter().filter(|&&t| t >= r).step_by(2) {
                let u_tr = pf.full.get(t, r)?;
                let u_ts = pf.full.get(t, s)?;
                worst = worst.max(linalg::l1_operator_norm(&(u_tr * u_rs - u_ts)));
            }
        }
    }
    Ok(worst)
}

/// Outcome of refitting the dichotomy of the perturbed family.
pub struct PerturbedDichotomy {
    pub estimate: DichotomyEstimate,
    pub report: DichotomyReport,
    /// Whether the fitted exponent reaches the target `beta` (up to 5%).
    pub meets_exponent_target: bool,
    pub commutation_residual: f64,
}

/// Builds perturbed projections from the stable fixed point and the
/// reflected construction, then refits the dichotomy of `U_B`.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_dichotomy(
    pf: &PerturbedFlow,
    flow: &LinearFlow,
    est: &DichotomyEstimate,
    b: &Perturbation,
    theta: &ThetaReport,
    norm: StarNorm,
    opts: PicardOptions,
    cfg: SampleConfig,
    beta_target: f64,
) -> Result<PerturbedDichotomy> {
    let grid = &pf.grid;
    let n = flow.dim();
    let stable_rank = est.projections.rank();

    // Unstable bundle from the reflected problem, where roles swap.
    let reflected_grid = grid.reflected();
    let reflected_flow = flow.reflect_time();
    let reflected_proj = ProjectionFamily::sample(reflected_grid.clone(), |t| {
        est.projections.p_near(-t).map(|x| -x) + DMatrix::identity(n, n)
    })?;
    let reflected_est = DichotomyEstimate {
        k: est.k,
        alpha: est.alpha,
        eps: est.eps,
        projections: reflected_proj,
        fit_residual: est.fit_residual,
        eps_unidentifiable: est.eps_unidentifiable,
    };
    let b_matrices: Vec<DMatrix<f64>> = grid.nodes().map(|t| b.matrix_at(t)).collect();
    let reflected_b = ReflectedPerturbation { matrices: b_matrices, grid: grid.clone() };
    let reflected_pf = picard_stable_only(
        &reflected_flow,
        &reflected_est,
        &|t: f64| -reflected_b.at(-t),
        &reflected_grid,
        norm,
        theta,
        opts,
        &mirror_anchors(grid, &pf.anchors),
    )?;

    // Projections at anchor times: range of the stable fixed point at
    // (t, t), complemented by the reflected stable bundle.
    let anchor_len = pf.anchors.len();
    let mut projections = Vec::with_capacity(anchor_len);
    for pos in 0..anchor_len {
        let stable_limit = &pf.stable.rows[pos][0];
        let vs = linalg::range_basis(stable_limit, crate::dichotomy::RANK_TOL);
        if vs.ncols() != stable_rank {
            return Err(Error::NoDichotomy { best_rate: 0.0 });
        }
        let mirrored_pos = anchor_len - 1 - pos;
        let unstable_limit = &reflected_pf.rows[mirrored_pos][0];
        let vu = linalg::range_basis(unstable_limit, crate::dichotomy::RANK_TOL);
        if vs.ncols() + vu.ncols() != n {
            return Err(Error::RankNotConstant);
        }
        let mut basis = DMatrix::zeros(n, n);
        basis.columns_mut(0, vs.ncols()).copy_from(&vs);
        basis.columns_mut(vs.ncols(), vu.ncols()).copy_from(&vu);
        let inv = linalg::invert(&basis)?;
        let mut selector = DMatrix::zeros(n, n);
        for i in 0..vs.ncols() {
            selector[(i, i)] = 1.0;
        }
        let mut p = &basis * selector * inv;
        // Roundoff in structurally zero entries gets amplified by the
        // unstable growth when the commutation defect is measured; snap it.
        let scale = linalg::l1_operator_norm(&p).max(1.0);
        for x in p.iter_mut() {
            if x.abs() < 1e-13 * scale {
                *x = 0.0;
            }
        }
        projections.push(p);
    }

    let stride_time = pf.grid.node(pf.anchors[1]) - pf.grid.node(pf.anchors[0]);
    let anchor_grid = TimeGrid::new(
        pf.grid.node(pf.anchors[0]),
        pf.grid.node(*pf.anchors.last().unwrap()),
        stride_time,
        grid.interval(),
    )?;
    let proj_b = ProjectionFamily::from_samples(anchor_grid.clone(), projections)?;

    // Envelope samples over anchor pairs of the perturbed family.
    let anchored = AnchorPropagator { pf, anchor_grid: anchor_grid.clone() };
    let indices: Vec<usize> = (0..anchor_grid.len()).collect();
    let pairs = sample_pairs(&indices, cfg);
    let samples = EnvelopeSamples::collect(&anchored, &proj_b, &pairs)?;
    let commutation_residual = samples.commutation_residual;
    let estimate = fit_from_samples(&samples, Some(est.eps), &proj_b)?;
    let report = crate::dichotomy::check_dichotomy(
        &anchored,
        &estimate,
        &anchor_grid,
        1e-6_f64.max(10.0 * commutation_residual),
        cfg,
    )?;
    let meets = estimate.alpha >= beta_target - 0.05;
    Ok(PerturbedDichotomy {
        estimate,
        report,
        meets_exponent_target: meets,
        commutation_residual,
    })
}

struct ReflectedPerturbation {
    matrices: Vec<DMatrix<f64>>,
    grid: TimeGrid,
}

impl ReflectedPerturbation {
    fn at(&self, t: f64) -> DMatrix<f64> {
        self.matrices[self.grid.nearest_index(t)].clone()
    }
}

fn mirror_anchors(grid: &TimeGrid, anchors: &[usize]) -> Vec<usize> {
    let last = grid.len() - 1;
    let mut out: Vec<usize> = anchors.iter().map(|&a| last - a).collect();
    out.sort_unstable();
    out
}

/// Phase-one iteration only, for the reflected (unstable) construction.
#[allow(clippy::too_many_arguments)]
fn picard_stable_only(
    flow: &LinearFlow,
    est: &DichotomyEstimate,
    b_at: &dyn Fn(f64) -> DMatrix<f64>,
    grid: &TimeGrid,
    norm: StarNorm,
    theta: &ThetaReport,
    opts: PicardOptions,
    anchors: &[usize],
) -> Result<PairTable> {
    if !theta.passes {
        return Err(Error::SmallnessViolated { k_theta: theta.k_theta });
    }
    let green = GreenFunction::new(flow, est)?;
    let n = flow.dim();
    let len = grid.len();
    let steps = flow.step_matrices(grid)?;
    let b_nodes: Vec<DMatrix<f64>> = grid.nodes().map(b_at).collect();

    let mut base_rows: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let mut row = Vec::with_capacity(len - a);
        row.push(est.projections.p_at(a).clone());
        for j in a + 1..len {
            let prev: &DMatrix<f64> = &row[j - 1 - a];
            row.push(&steps[j - 1] * prev);
        }
        base_rows.push(row);
    }

    let mut table =
        PairTable { grid: grid.clone(), anchors: anchors.to_vec(), rows: base_rows.clone() };
    let mut forcing = vec![DMatrix::zeros(n, n); len];
    for _ in 0..opts.max_iter {
        let mut next_rows = Vec::with_capacity(anchors.len());
        for (pos, &a) in anchors.iter().enumerate() {
            for j in 0..len {
                forcing[j] = if j >= a {
                    &b_nodes[j] * &table.rows[pos][j - a]
                } else {
                    DMatrix::zeros(n, n)
                };
            }
            let conv = green.convolve_matrices_from(&forcing, a)?;
            let row: Vec<DMatrix<f64>> =
                base_rows[pos].iter().zip(conv).map(|(base, c)| base + c).collect();
            next_rows.push(row);
        }
        let next = PairTable { grid: grid.clone(), anchors: anchors.to_vec(), rows: next_rows };
        let delta = next.star_norm_diff(&table, &norm);
        table = next;
        if delta <= opts.tol {
            return Ok(table);
        }
    }
    Err(Error::NonConvergence { max_iter: opts.max_iter, last_delta: f64::NAN })
}

struct AnchorPropagator<'a> {
    pf: &'a PerturbedFlow,
    anchor_grid: TimeGrid,
}

impl Propagator for AnchorPropagator<'_> {
    fn dim(&self) -> usize {
        self.pf.dim()
    }
    fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let _ = self.anchor_grid.index_of(t)?;
        self.pf.propagate(t, s)
    }
}

/// A dichotomy certificate selected to make the smallness product
/// `K (theta + tail)` as small as possible.
pub struct SmallnessCertificate {
    pub alpha: f64,
    pub k: f64,
    pub eps: f64,
    pub beta: f64,
    pub theta: ThetaReport,
}

/// Scans valid envelope pairs `(alpha, K(alpha))` and exponents `beta` for
/// the certificate minimizing `K (theta + tail)`.
///
/// Any `(K, alpha)` with the bound holding on every sample is a legitimate
/// dichotomy certificate; the steepest fit often has a large `K` that
/// defeats the smallness condition, while a flatter envelope with `K` near
/// one certifies it.
pub fn optimize_certificate(
    samples: &EnvelopeSamples,
    b: &ScalarGridFunction,
    eps: f64,
    tail_rate: f64,
    alpha_max: f64,
    beta_request: Option<f64>,
) -> Result<SmallnessCertificate> {
    let mut best: Option<SmallnessCertificate> = None;
    let alpha_steps = 64;
    for i in 1..=alpha_steps {
        let alpha = alpha_max * (i as f64) / (alpha_steps as f64);
        let k = samples.min_log_k(alpha, eps).exp();
        let betas: Vec<f64> = match beta_request {
            Some(beta) => vec![beta],
            None => (1..=18)
                .map(|j| alpha * (j as f64) * 0.05)
                .filter(|&beta| beta > 0.0 && eps < alpha - beta)
                .collect(),
        };
        for beta in betas {
            if !(beta > 0.0 && beta < alpha && eps < alpha - beta) {
                continue;
            }
            if tail_rate >= alpha - beta {
                continue;
            }
            let theta = compute_theta(b, alpha, beta, tail_rate, k)?;
            // Strictly smaller product wins; near-ties prefer the stronger
            // conclusion (larger beta, then larger alpha).
            let better = match &best {
                None => true,
                Some(cur) => {
                    let tol = 1e-9 * cur.theta.k_theta.max(1e-30);
                    theta.k_theta < cur.theta.k_theta - tol
                        || (theta.k_theta <= cur.theta.k_theta + tol
                            && (beta > cur.beta + 1e-15
                                || ((beta - cur.beta).abs() <= 1e-15 && alpha > cur.alpha)))
                }
            };
            if better {
                best = Some(SmallnessCertificate { alpha, k, eps, beta, theta });
            }
        }
    }
    best.ok_or_else(|| Error::Domain("no admissible (alpha, beta) pair to certify".into()))
}
