//! Fitting and checking nonuniform exponential dichotomy constants.
//!
//! A dichotomy estimate is an envelope `(K, alpha, eps)` together with a
//! projection family such that
//!
//! ```text
//! ||U(t,s)P(s)|| <= K e^{-alpha (t-s) + eps |s|},   t >= s,
//! ||U(t,s)Q(s)|| <= K e^{-alpha (s-t) + eps |s|},   s >= t,
//! ```
//!
//! where the second line evaluates the flow backward on the unstable bundle
//! through the inverse of its restriction to `range Q`. Constants are fitted
//! on the log-envelope by a deterministic coordinate search (a Chebyshev fit
//! followed by an upward shift of `log K` so the bound holds on every
//! sample).

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::Propagator;
use crate::grid::TimeGrid;
use crate::linalg;

/// Relative tolerance for rank decisions in range factorizations.
pub const RANK_TOL: f64 = 1e-10;
/// Condition-number ceiling for inverting unstable restrictions.
pub const RESTRICTION_COND_MAX: f64 = 1e12;
/// Commutation defect allowed before a projection family is rejected.
pub const COMMUTATION_TOL: f64 = 1e-6;

#[derive(Clone)]
enum ProjSource {
    Constant { p: DMatrix<f64>, q_basis: DMatrix<f64> },
    PerNode { p: Vec<DMatrix<f64>>, q_basis: Vec<DMatrix<f64>> },
}

/// A projection-valued function sampled on a grid.
///
/// Idempotency is enforced to 1e-10 at every node and the rank must be
/// constant across the grid.
#[derive(Clone)]
pub struct ProjectionFamily {
    grid: TimeGrid,
    dim: usize,
    rank: usize,
    source: ProjSource,
}

impl ProjectionFamily {
    pub fn constant(grid: TimeGrid, p: DMatrix<f64>) -> Result<Self> {
        let dim = p.nrows();
        validate_projection(&p)?;
        let q = DMatrix::identity(dim, dim) - &p;
        let q_basis = linalg::range_basis(&q, RANK_TOL);
        let rank = linalg::range_basis(&p, RANK_TOL).ncols();
        if rank + q_basis.ncols() != dim {
            return Err(Error::RankNotConstant);
        }
        Ok(ProjectionFamily { grid, dim, rank, source: ProjSource::Constant { p, q_basis } })
    }

    pub fn from_samples(grid: TimeGrid, p: Vec<DMatrix<f64>>) -> Result<Self> {
        if p.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} projections for {} nodes",
                p.len(),
                grid.len()
            )));
        }
        let dim = p[0].nrows();
        let mut rank = None;
        let mut q_basis = Vec::with_capacity(p.len());
        for m in &p {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.nrows() });
            }
            validate_projection(m)?;
            let r = linalg::range_basis(m, RANK_TOL).ncols();
            match rank {
                None => rank = Some(r),
                Some(r0) if r0 != r => return Err(Error::RankNotConstant),
                _ => {}
            }
            let q = DMatrix::identity(dim, dim) - m;
            q_basis.push(linalg::range_basis(&q, RANK_TOL));
        }
        Ok(ProjectionFamily {
            grid,
            dim,
            rank: rank.unwrap_or(0),
            source: ProjSource::PerNode { p, q_basis },
        })
    }

    pub fn sample(grid: TimeGrid, f: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        let p: Vec<DMatrix<f64>> = grid.nodes().map(&f).collect();
        Self::from_samples(grid, p)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn p_at(&self, i: usize) -> &DMatrix<f64> {
        match &self.source {
            ProjSource::Constant { p, .. } => p,
            ProjSource::PerNode { p, .. } => &p[i],
        }
    }

    pub fn q_at(&self, i: usize) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) - self.p_at(i)
    }

    pub fn q_basis_at(&self, i: usize) -> &DMatrix<f64> {
        match &self.source {
            ProjSource::Constant { q_basis, .. } => q_basis,
            ProjSource::PerNode { q_basis, .. } => &q_basis[i],
        }
    }

    /// Projection at an arbitrary time, looked up at the nearest node.
    pub fn p_near(&self, t: f64) -> &DMatrix<f64> {
        self.p_at(self.grid.nearest_index(t))
    }

    /// The complementary family `Q(t) = Id - P(t)`.
    pub fn complement(&self) -> Result<ProjectionFamily> {
        match &self.source {
            ProjSource::Constant { p, .. } => {
                Self::constant(self.grid.clone(), DMatrix::identity(self.dim, self.dim) - p)
            }
            ProjSource::PerNode { p, .. } => Self::from_samples(
                self.grid.clone(),
                p.iter().map(|m| DMatrix::identity(self.dim, self.dim) - m).collect(),
            ),
        }
    }
}

fn validate_projection(p: &DMatrix<f64>) -> Result<()> {
    if !linalg::is_finite_matrix(p) {
        return Err(Error::NonFinite("projection matrix"));
    }
    let residual = linalg::l1_operator_norm(&(p * p - p));
    if residual > 1e-10 {
        return Err(Error::NotAProjection { residual });
    }
    Ok(())
}

/// Backward solution operator `U(t, s) Q(s)` for `s >= t`, defined through
/// the inverse of `U(s, t)` restricted to the unstable bundle.
pub fn backward_unstable(
    prop: &dyn Propagator,
    proj: &ProjectionFamily,
    i_lo: usize,
    i_hi: usize,
) -> Result<DMatrix<f64>> {
    let n = proj.dim();
    let v_lo = proj.q_basis_at(i_lo);
    let v_hi = proj.q_basis_at(i_hi);
    let r = v_lo.ncols();
    if r == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let t_lo = proj.grid().node(i_lo);
    let t_hi = proj.grid().node(i_hi);
    let forward = prop.propagate(t_hi, t_lo)? * v_lo;
    // Coordinates of the forward images in the basis of range Q at t_hi.
    let c = v_hi.transpose() * &forward;
    let cond = linalg::condition_number(&c);
    if !cond.is_finite() || cond > RESTRICTION_COND_MAX {
        return Err(Error::SingularRestriction { cond });
    }
    let c_inv = linalg::invert(&c)?;
    Ok(v_lo * c_inv * v_hi.transpose() * proj.q_at(i_hi))
}

/// Deterministic selection of node pairs `(hi, lo)` with `hi >= lo`.
///
/// All pairs are used when both index sets are small; otherwise each axis is
/// stratified and one representative per stratum is drawn from a seeded
/// generator.
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub max_per_side: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { max_per_side: 200, seed: 0 }
    }
}

pub fn sample_pairs(indices: &[usize], cfg: SampleConfig) -> Vec<(usize, usize)> {
    let picks = stratified_picks(indices, cfg);
    let mut pairs = Vec::with_capacity(picks.len() * (picks.len() + 1) / 2);
    for (a, &hi) in picks.iter().enumerate() {
        for &lo in &picks[..=a] {
            pairs.push((hi, lo));
        }
    }
    pairs
}

fn stratified_picks(indices: &[usize], cfg: SampleConfig) -> Vec<usize> {
    if indices.len() <= cfg.max_per_side {
        return indices.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.max_per_side;
    let mut picks = Vec::with_capacity(m);
    for k in 0..m {
        let lo = k * indices.len() / m;
        let hi = ((k + 1) * indices.len() / m).max(lo + 1);
        let j = rng.gen_range(lo..hi);
        picks.push(indices[j]);
    }
    // Endpoints anchor the envelope; make sure they are present.
    *picks.first_mut().unwrap() = indices[0];
    *picks.last_mut().unwrap() = *indices.last().unwrap();
    picks
}

/// One log-envelope observation: `log_norm <= log K - alpha * lag + eps * weight`.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeSample {
    pub log_norm: f64,
    pub lag: f64,
    pub weight: f64,
    pub stable: bool,
}

/// Log-envelope data collected from a flow and a projection family over
/// sampled pairs, for both the stable and the backward unstable inequality.
pub struct EnvelopeSamples {
    pub samples: Vec<EnvelopeSample>,
    pub commutation_residual: f64,
    /// Span of the initial-time weights |s| seen in the data.
    pub weight_span: f64,
}

impl EnvelopeSamples {
    pub fn collect(
        prop: &dyn Propagator,
        proj: &ProjectionFamily,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let grid = proj.grid();
        let mut samples = Vec::with_capacity(2 * pairs.len());
        let mut commutation: f64 = 0.0;
        let mut w_min = f64::INFINITY;
        let mut w_max = f64::NEG_INFINITY;
        for &(hi, lo) in pairs {
            let (t, s) = (grid.node(hi), grid.node(lo));
            let u = prop.propagate(t, s)?;
            let up = &u * proj.p_at(lo);
            commutation = commutation.max(linalg::l1_operator_norm(&(&up - proj.p_at(hi) * &u)));
            let stable_norm = linalg::l1_operator_norm(&up);
            if stable_norm > 1e-300 {
                samples.push(EnvelopeSample {
                    log_norm: stable_norm.ln(),
                    lag: t - s,
                    weight: s.abs(),
                    stable: true,
                });
                w_min = w_min.min(s.abs());
                w_max = w_max.max(s.abs());
            }
            if proj.rank() < proj.dim() && proj.dim() - proj.rank() > 0 {
                let back = backward_unstable(prop, proj, lo, hi)?;
                let unstable_norm = linalg::l1_operator_norm(&back);
                if unstable_norm > 1e-300 {
                    samples.push(EnvelopeSample {
                        log_norm: unstable_norm.ln(),
                        lag: t - s,
                        weight: t.abs(),
                        stable: false,
                    });
                    w_min = w_min.min(t.abs());
                    w_max = w_max.max(t.abs());
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let weight_span = if w_max > w_min { w_max - w_min } else { 0.0 };
        Ok(EnvelopeSamples { samples, commutation_residual: commutation, weight_span })
    }

    /// Smallest feasible `log K` for fixed `(alpha, eps)`.
    pub fn min_log_k(&self, alpha: f64, eps: f64) -> f64 {
        self.samples
            .iter()
            .map(|s| s.log_norm + alpha * s.lag - eps * s.weight)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Half-range of the shifted samples: the Chebyshev deviation of the
    /// best `log K` for fixed `(alpha, eps)`.
    fn half_range(&self, alpha: f64, eps: f64) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &self.samples {
            let u = s.log_norm + alpha * s.lag - eps * s.weight;
            lo = lo.min(u);
            hi = hi.max(u);
        }
        0.5 * (hi - lo)
    }

    /// Least-squares seed for the coordinate search.
    fn least_squares(&self, fit_eps: bool) -> (f64, f64) {
        // Model log_norm ~ c - alpha * lag + eps * weight.
        let k = if fit_eps { 3 } else { 2 };
        let mut ata = DMatrix::zeros(k, k);
        let mut atb = nalgebra::DVector::zeros(k);
        for s in &self.samples {
            let row = if fit_eps {
                vec![1.0, -s.lag, s.weight]
            } else {
                vec![1.0, -s.lag]
            };
            for i in 0..k {
                atb[i] += row[i] * s.log_norm;
                for j in 0..k {
                    ata[(i, j)] += row[i] * row[j];
                }
            }
        }
        match ata.lu().solve(&atb) {
            Some(x) => (x[1], if fit_eps { x[2].max(0.0) } else { 0.0 }),
            None => (0.0, 0.0),
        }
    }
}

/// Fitted dichotomy constants together with the projections they refer to.
#[derive(Clone)]
pub struct DichotomyEstimate {
    pub k: f64,
    pub alpha: f64,
    pub eps: f64,
    pub projections: ProjectionFamily,
    /// Chebyshev deviation of the log-envelope fit before the upward shift.
    pub fit_residual: f64,
    /// Set when eps was reported as zero because the grid cannot identify it.
    pub eps_unidentifiable: bool,
}

impl DichotomyEstimate {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::Domain("K must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Domain("alpha must be positive".into()));
        }
        if self.eps < 0.0 {
            return Err(Error::Domain("eps must be nonnegative".into()));
        }
        Ok(())
    }

    /// log of the envelope value `K e^{-alpha lag + eps w}`.
    pub fn log_bound(&self, lag: f64, weight: f64) -> f64 {
        self.k.ln() - self.alpha * lag + self.eps * weight
    }
}

/// Violation report for both dichotomy inequalities.
#[derive(Debug, Clone)]
pub struct DichotomyReport {
    pub stable_violation: f64,
    pub unstable_violation: f64,
    pub commutation_residual: f64,
    pub pass: bool,
}

/// Maximum commutation defect `||U(t,s)P(s) - P(t)U(t,s)||` over sampled
/// pairs.
pub fn check_commutation(
    prop: &dyn Propagator,
    proj: &ProjectionFamily,
    grid: &TimeGrid,
    cfg: SampleConfig,
) -> Result<f64> {
    if proj.dim() != prop.dim() {
        return Err(Error::DimensionMismatch { expected: prop.dim(), got: proj.dim() });
    }
    if !proj.grid().same_nodes_as(grid) {
        return Err(Error::GridMismatch("projection grid differs from sampling grid".into()));
    }
    let indices: Vec<usize> = (0..grid.len()).collect();
    let pairs = sample_pairs(&indices, cfg);
    let mut worst = 0.0f64;
    for (hi, lo) in pairs {
        let (t, s) = (grid.node(hi), grid.node(lo));
        let u = prop.propagate(t, s)?;
        let defect = &u * proj.p_at(lo) - proj.p_at(hi) * &u;
        worst = worst.max(linalg::l1_operator_norm(&defect));
    }
    Ok(worst)
}

/// Span of |s| below which eps is reported as zero instead of fitted.
pub const EPS_IDENTIFIABLE_SPAN: f64 = 5.0;

/// Fits `(K, alpha, eps)` to the sampled log-envelope.
///
/// The deviation is minimized by a multiresolution coordinate search over
/// `(alpha, eps)`; `log K` is then shifted up so the bound holds on every
/// sample. `eps_fixed` pins eps; otherwise eps is fitted only when the
/// grid spans enough initial times to identify it.
pub fn fit_dichotomy(
    prop: &dyn Propagator,
    proj: &ProjectionFamily,
    grid: &TimeGrid,
    eps_fixed: Option<f64>,
    cfg: SampleConfig,
) -> Result<DichotomyEstimate> {
    if grid.len() < 10 {
        return Err(Error::Domain("dichotomy fit needs at least 10 grid nodes".into()));
    }
    let indices: Vec<usize> = (0..grid.len()).collect();
    let pairs = sample_pairs(&indices, cfg);
    let data = EnvelopeSamples::collect(prop, proj, &pairs)?;
    if data.commutation_residual > COMMUTATION_TOL {
        return Err(Error::Domain(format!(
            "projections do not commute with the flow (residual {:.3e})",
            data.commutation_residual
        )));
    }
    fit_from_samples(&data, eps_fixed, proj)
}

pub(crate) fn fit_from_samples(
    data: &EnvelopeSamples,
    eps_fixed: Option<f64>,
    proj: &ProjectionFamily,
) -> Result<DichotomyEstimate> {
    let eps_free = eps_fixed.is_none() && data.weight_span >= EPS_IDENTIFIABLE_SPAN;
    let eps_unidentifiable = eps_fixed.is_none() && !eps_free;
    let (alpha0, eps0) = data.least_squares(eps_free);
    let mut alpha = alpha0;
    let mut eps = eps_fixed.unwrap_or(if eps_free { eps0 } else { 0.0 });

    let rounds = if eps_free { 4 } else { 1 };
    for _ in 0..rounds {
        alpha = scan_1d(|a| data.half_range(a, eps), alpha, 2.0_f64.max(alpha.abs()), None);
        if eps_free {
            eps = scan_1d(
                |e| data.half_range(alpha, e),
                eps,
                1.0_f64.max(eps.abs()),
                Some((0.0, f64::INFINITY)),
            );
        }
    }

    if alpha <= 1e-9 {
        return Err(Error::NoDichotomy { best_rate: alpha });
    }
    let fit_residual = data.half_range(alpha, eps);
    let k = data.min_log_k(alpha, eps).exp();
    let est = DichotomyEstimate {
        k,
        alpha,
        eps,
        projections: clone_family(proj)?,
        fit_residual,
        eps_unidentifiable,
    };
    est.validate()?;
    Ok(est)
}

pub(crate) fn clone_family(proj: &ProjectionFamily) -> Result<ProjectionFamily> {
    match &proj.source {
        ProjSource::Constant { p, .. } => ProjectionFamily::constant(proj.grid.clone(), p.clone()),
        ProjSource::PerNode { p, .. } => {
            ProjectionFamily::from_samples(proj.grid.clone(), p.clone())
        }
    }
}

/// Deterministic multiresolution scan of a one-dimensional convex
/// piecewise-linear objective.
fn scan_1d(
    f: impl Fn(f64) -> f64,
    center: f64,
    span: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let clamp = |x: f64| match bounds {
        Some((lo, hi)) => x.clamp(lo, hi),
        None => x,
    };
    let mut center = clamp(center);
    let mut span = span;
    let points = 80usize;
    for _round in 0..40 {
        let lo = clamp(center - span);
        let hi = clamp(center + span);
        let mut best_x = lo;
        let mut best_f = f(lo);
        for i in 1..=points {
            let x = lo + (hi - lo) * (i as f64) / (points as f64);
            let fx = f(x);
            if fx < best_f {
                best_f = fx;
                best_x = x;
            }
        }
        let on_boundary = (best_x - lo).abs() < 1e-300 || (hi - best_x).abs() < 1e-300;
        center = best_x;
        if on_boundary {
            span *= 3.0;
        } else {
            span *= 2.5 / points as f64 * 4.0;
        }
        if span < 1e-12 {
            break;
        }
    }
    center
}

/// Evaluates both dichotomy inequalities for an estimate over sampled pairs.
pub fn check_dichotomy(
    prop: &dyn Propagator,
    est: &DichotomyEstimate,
    grid: &TimeGrid,
    tol: f64,
    cfg: SampleConfig,
) -> Result<DichotomyReport> {
    est.validate()?;
    let proj = &est.projections;
    let indices: Vec<usize> = (0..grid.len()).collect();
    let pairs = sample_pairs(&indices, cfg);
    let mut stable: f64 = 0.0;
    let mut unstable: f64 = 0.0;
    let mut commutation: f64 = 0.0;
    for &(hi, lo) in &pairs {
        let (t, s) = (grid.node(hi), grid.node(lo));
        let u = prop.propagate(t, s)?;
        let up = &u * proj.p_at(lo);
        commutation = commutation.max(linalg::l1_operator_norm(&(&up - proj.p_at(hi) * &u)));
        let norm = linalg::l1_operator_norm(&up);
        if norm > 1e-300 {
            stable = stable.max((norm.ln() - est.log_bound(t - s, s.abs())).exp());
        }
        if proj.rank() < proj.dim() {
            let back = backward_unstable(prop, proj, lo, hi)?;
            let norm = linalg::l1_operator_norm(&back);
            if norm > 1e-300 {
                unstable = unstable.max((norm.ln() - est.log_bound(t - s, t.abs())).exp());
            }
        }
    }
    let pass = stable <= 1.0 + tol && unstable <= 1.0 + tol && commutation <= tol;
    Ok(DichotomyReport {
        stable_violation: stable,
        unstable_violation: unstable,
        commutation_residual: commutation,
        pass,
    })
}
