//! Evolution families of linear nonautonomous systems.
//!
//! A flow is either a closed-form map `(t, s) -> U(t, s)` or a coefficient
//! map `t -> A(t)` propagated by a classical fourth-order one-step method
//! with a fixed step. Closed-form flows may be evaluated at any pair of
//! times; coefficient flows only forward (`t >= s`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Interval, TimeGrid, VectorGridFunction};
use crate::linalg;

type MatrixMap2 = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
type MatrixMap1 = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
enum FlowSource {
    ClosedForm(MatrixMap2),
    Coefficient { a: MatrixMap1, step: f64 },
}

/// Anything that can produce the solution operator between two times.
pub trait Propagator {
    fn dim(&self) -> usize;
    /// Solution operator from time `s` to time `t >= s`.
    fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>>;
}

/// An evolution family `U(t, s)` on R, R+, or R-.
#[derive(Clone)]
pub struct LinearFlow {
    dim: usize,
    source: FlowSource,
    domain: Interval,
}

impl std::fmt::Debug for LinearFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.source {
            FlowSource::ClosedForm(_) => "closed_form",
            FlowSource::Coefficient { .. } => "coefficient",
        };
        write!(f, "LinearFlow {{ dim: {}, source: {kind}, domain: {:?} }}", self.dim, self.domain)
    }
}

impl LinearFlow {
    pub fn closed_form(
        dim: usize,
        domain: Interval,
        map: impl Fn(f64, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        LinearFlow { dim, source: FlowSource::ClosedForm(Arc::new(map)), domain }
    }

    pub fn scalar_closed_form(
        domain: Interval,
        map: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::closed_form(1, domain, move |t, s| DMatrix::from_element(1, 1, map(t, s)))
    }

    /// Coefficient-sourced flow propagated with a fixed-step RK4 integrator.
    pub fn coefficient(
        dim: usize,
        domain: Interval,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        step: f64,
    ) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Domain(format!("integrator step {step} must be positive")));
        }
        Ok(LinearFlow { dim, source: FlowSource::Coefficient { a: Arc::new(a), step }, domain })
    }

    pub fn scalar_coefficient(
        domain: Interval,
        a: impl Fn(f64) -> f64 + Send + Sync + 'static,
        step: f64,
    ) -> Result<Self> {
        Self::coefficient(1, domain, move |t| DMatrix::from_element(1, 1, a(t)), step)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(self.source, FlowSource::ClosedForm(_))
    }

    /// `U(t, s)`. Closed-form flows accept any pair; coefficient flows
    /// require `t >= s`.
    pub fn evaluate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        if t == s {
            return Ok(DMatrix::identity(self.dim, self.dim));
        }
        match &self.source {
            FlowSource::ClosedForm(map) => {
                let m = map(t, s);
                if m.nrows() != self.dim || m.ncols() != self.dim {
                    return Err(Error::DimensionMismatch { expected: self.dim, got: m.nrows() });
                }
                if !linalg::is_finite_matrix(&m) {
                    return Err(Error::NonFinite("closed-form flow value"));
                }
                Ok(m)
            }
            FlowSource::Coefficient { a, step } => {
                if t < s {
                    return Err(Error::BackwardEvaluation { t, s });
                }
                let n_steps = (((t - s) / step) - 1e-12).ceil().max(1.0) as usize;
                let k = (t - s) / n_steps as f64;
                let mut u = DMatrix::identity(self.dim, self.dim);
                let mut time = s;
                for _ in 0..n_steps {
                    u = rk4_step(a.as_ref(), time, k, &u)?;
                    time += k;
                }
                if !linalg::is_finite_matrix(&u) {
                    return Err(Error::NonFinite("integrated flow value"));
                }
                Ok(u)
            }
        }
    }

    /// The generator `A(t)`: exact for coefficient flows, a central
    /// difference of the flow for closed-form ones.
    pub fn generator(&self, t: f64) -> Result<DMatrix<f64>> {
        match &self.source {
            FlowSource::Coefficient { a, .. } => {
                let m = a(t);
                if !linalg::is_finite_matrix(&m) {
                    return Err(Error::NonFinite("coefficient matrix"));
                }
                Ok(m)
            }
            FlowSource::ClosedForm(_) => {
                let d = 1e-5;
                let fwd = self.evaluate(t + d, t)?;
                let bwd = self.evaluate(t - d, t)?;
                Ok((fwd - bwd) / (2.0 * d))
            }
        }
    }

    /// One-panel solution operators `U(t_{i+1}, t_i)` along a grid.
    pub fn step_matrices(&self, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
        (0..grid.len() - 1)
            .map(|i| self.evaluate(grid.node(i + 1), grid.node(i)))
            .collect()
    }

    /// Flow of the time-reflected system `z' = -A(-t) z`.
    ///
    /// Solutions correspond to time-reversed solutions of the original
    /// system: the reflected operator is `U(-t, -s) = U(-s, -t)^{-1}`.
    pub fn reflect_time(&self) -> LinearFlow {
        let domain = self.domain.reflected();
        match &self.source {
            FlowSource::Coefficient { a, step } => {
                let a = Arc::clone(a);
                LinearFlow {
                    dim: self.dim,
                    source: FlowSource::Coefficient {
                        a: Arc::new(move |t: f64| -a(-t)),
                        step: *step,
                    },
                    domain,
                }
            }
            FlowSource::ClosedForm(map) => {
                let map = Arc::clone(map);
                let dim = self.dim;
                LinearFlow {
                    dim,
                    source: FlowSource::ClosedForm(Arc::new(move |t: f64, s: f64| {
                        let forward = map(-s, -t);
                        forward
                            .try_inverse()
                            .unwrap_or_else(|| DMatrix::from_element(dim, dim, f64::NAN))
                    })),
                    domain,
                }
            }
        }
    }
}

impl Propagator for LinearFlow {
    fn dim(&self) -> usize {
        self.dim
    }
    fn propagate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.evaluate(t, s)
    }
}

fn rk4_step(
    a: &(dyn Fn(f64) -> DMatrix<f64> + Send + Sync),
    t: f64,
    h: f64,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a1 = a(t);
    let a2 = a(t + 0.5 * h);
    let a3 = a(t + h);
    if !(linalg::is_finite_matrix(&a1) && linalg::is_finite_matrix(&a2) && linalg::is_finite_matrix(&a3))
    {
        return Err(Error::NonFinite("coefficient matrix"));
    }
    let k1 = &a1 * u;
    let k2 = &a2 * &(u + (h / 2.0) * &k1);
    let k3 = &a2 * &(u + (h / 2.0) * &k2);
    let k4 = &a3 * &(u + h * &k3);
    Ok(u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Maximum defect of the composition law over sampled node triples
/// `t >= r >= s`.
pub fn cocycle_residual(flow: &LinearFlow, grid: &TimeGrid, samples: usize) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Domain("at least one sample triple is required".into()));
    }
    let n = grid.len();
    if n < 2 {
        return Err(Error::DegenerateGrid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut triples: Vec<(usize, usize, usize)> = vec![(0, (n - 1) / 2, n - 1)];
    while triples.len() < samples {
        let mut idx = [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)];
        idx.sort_unstable();
        triples.push((idx[0], idx[1], idx[2]));
    }
    let mut worst = 0.0f64;
    for (i, j, k) in triples.into_iter().take(samples.max(1)) {
        let (s, r, t) = (grid.node(i), grid.node(j), grid.node(k));
        let u_tr = flow.evaluate(t, r)?;
        let u_rs = flow.evaluate(r, s)?;
        let u_ts = flow.evaluate(t, s)?;
        let defect = linalg::l1_operator_norm(&(&u_tr * &u_rs - u_ts));
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// Simpson-type weights for the grid segment `[0 ..= panels]`.
///
/// Even panel counts use composite Simpson; odd counts finish with a 3/8
/// rule so the order stays uniform. A single panel falls back to the
/// trapezoid.
pub(crate) fn simpson_weights(panels: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; panels + 1];
    match panels {
        0 => {}
        1 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let simpson_panels = if panels.is_multiple_of(2) { panels } else { panels - 3 };
            if simpson_panels > 0 {
                w[0] += h / 3.0;
                w[simpson_panels] += h / 3.0;
                for (i, wi) in w.iter_mut().enumerate().take(simpson_panels).skip(1) {
                    *wi += if i % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
                }
            }
            if panels % 2 == 1 {
                let base = simpson_panels;
                w[base] += 3.0 * h / 8.0;
                w[base + 1] += 9.0 * h / 8.0;
                w[base + 2] += 9.0 * h / 8.0;
                w[base + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

/// Maximum defect of the mild-solution identity
/// `x(t) = U(t,s) x(s) + int_s^t U(t,tau) y(tau) dtau` over grid nodes
/// `t >= s`.
///
/// The integral uses Simpson-type quadrature so the check stays
/// independent of the trapezoid rules used to build candidate solutions.
pub fn verify_mild_solution(
    x: &VectorGridFunction,
    flow: &LinearFlow,
    y: &VectorGridFunction,
    s: f64,
) -> Result<f64> {
    if !x.grid().same_nodes_as(y.grid()) {
        return Err(Error::GridMismatch("x and y are sampled on different grids".into()));
    }
    let grid = x.grid();
    let s_idx = grid.index_of(s)?;
    let h = grid.step();
    let steps = flow.step_matrices(grid)?;
    let x_s = x.value(s_idx).clone();

    // row[i] = U(t_j, t_{s_idx + i}) maintained incrementally over j.
    let mut row: Vec<DMatrix<f64>> = vec![DMatrix::identity(flow.dim(), flow.dim())];
    let mut worst = 0.0f64;
    for j in s_idx + 1..grid.len() {
        let step = &steps[j - 1];
        for m in row.iter_mut() {
            *m = step * &*m;
        }
        row.push(DMatrix::identity(flow.dim(), flow.dim()));
        let w = simpson_weights(j - s_idx, h);
        let mut integral = DVector::zeros(flow.dim());
        for (i, wi) in w.iter().enumerate() {
            if *wi != 0.0 {
                integral += *wi * (&row[i] * y.value(s_idx + i));
            }
        }
        let defect = x.value(j) - &row[0] * &x_s - integral;
        worst = worst.max(linalg::l1_vector_norm(&defect));
    }
    Ok(worst)
}

/// Grid function `t -> U(t, s) v` built from one-panel operators.
pub fn propagate_on_grid(
    flow: &LinearFlow,
    grid: &TimeGrid,
    s_idx: usize,
    v: &DVector<f64>,
) -> Result<VectorGridFunction> {
    let steps = flow.step_matrices(grid)?;
    let mut values = vec![DVector::zeros(flow.dim()); grid.len()];
    values[s_idx] = v.clone();
    for j in s_idx + 1..grid.len() {
        values[j] = &steps[j - 1] * &values[j - 1];
    }
    GridFunction::new(grid.clone(), values)
}
