//! Built-in model problems with closed-form facts for oracles.
//!
//! `scalar_decay` and `saddle_2x2` are exactly solvable baselines. The
//! `example_sys` scenario is the diagonal system with coefficients
//! `a(t) = -t + sin t`, `b(t) = t - cos t` perturbed through
//! Riemann-Liouville fractional integrals of `sin` and `cos`, damped by
//! `e^{-2 eps t}`. The `nonlocal_ide` scenario is a desk-scale surrogate of
//! a convolution perturbation with the oscillating kernel
//! `J(xi) = sin(xi^2) (1 + xi^2)^{-beta}`: the state is the trajectory
//! sampled on a shift window, the base flow is scalar, and `B(t)` is the
//! discretized kernel quadrature scaled by a capped power-law weight.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use statrs::function::gamma::gamma;

use crate::dichotomy::ProjectionFamily;
use crate::error::{Error, Result};
use crate::flows::LinearFlow;
use crate::grid::{GridFunction, Interval, ScalarGridFunction, TimeGrid};
use crate::roughness::{Perturbation, ScalarFn};

/// Riemann-Liouville fractional integral of a named order.
#[derive(Clone)]
pub struct FractionalIntegralSpec {
    pub gamma: f64,
    pub base: ScalarFn,
}

impl FractionalIntegralSpec {
    pub fn new(order: f64, base: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(order > 0.0) {
            return Err(Error::Domain(format!("fractional order {order} must be positive")));
        }
        Ok(FractionalIntegralSpec { gamma: order, base: Arc::new(base) })
    }
}

/// Product-trapezoidal Riemann-Liouville integral on a grid starting at 0.
///
/// The weight `(t - s)^{gamma - 1}` is integrated exactly on each panel
/// against the piecewise-linear interpolant of the integrand, so the rule
/// is exact for piecewise-linear data and keeps second order through the
/// endpoint singularity when `gamma < 1`.
pub fn riemann_liouville(
    spec: &FractionalIntegralSpec,
    grid: &TimeGrid,
) -> Result<ScalarGridFunction> {
    if grid.t_min().abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "fractional integral grid must start at 0, got {}",
            grid.t_min()
        )));
    }
    let g = spec.gamma;
    let n = grid.len();
    let h = grid.step();
    let values: Vec<f64> = grid.nodes().map(|t| (spec.base)(t)).collect();
    let scale = h.powf(g) / gamma(g + 2.0);
    // k^{gamma+1} lookup shared by all output nodes.
    let pow: Vec<f64> = (0..n + 1).map(|k| (k as f64).powf(g + 1.0)).collect();
    let mut out = vec![0.0; n];
    for j in 1..n {
        let jf = j as f64;
        let mut acc = values[j] + values[0] * (pow[j - 1] - jf.powf(g) * (jf - g - 1.0));
        for (i, v) in values.iter().enumerate().take(j).skip(1) {
            let k = j - i;
            acc += v * (pow[k + 1] + pow[k - 1] - 2.0 * pow[k]);
        }
        out[j] = scale * acc;
    }
    GridFunction::new(grid.clone(), out)
}

fn interp(values: &[f64], t0: f64, h: f64, t: f64) -> f64 {
    let n = values.len();
    let pos = (t - t0) / h;
    if pos <= 0.0 {
        return values[0];
    }
    if pos >= (n - 1) as f64 {
        return values[n - 1];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

/// A named model problem materialized on a grid.
pub struct Scenario {
    pub name: String,
    pub flow: LinearFlow,
    pub projections: ProjectionFamily,
    pub perturbation: Perturbation,
    pub grid: TimeGrid,
    /// Closed-form quantities for oracles: at least `k`, `alpha`, `eps`.
    pub facts: BTreeMap<String, f64>,
    /// Declared decay rate of `b` beyond the grid.
    pub tail_rate: f64,
}

impl Scenario {
    pub fn fact(&self, key: &str) -> Option<f64> {
        self.facts.get(key).copied()
    }
}

fn facts(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `x' = -x`: pure decay with unit constants.
pub fn build_scalar_decay(grid: &TimeGrid) -> Result<Scenario> {
    let flow = LinearFlow::scalar_closed_form(grid.interval(), |t, s| (-(t - s)).exp());
    let projections = ProjectionFamily::constant(grid.clone(), DMatrix::identity(1, 1))?;
    Ok(Scenario {
        name: "scalar_decay".into(),
        flow,
        projections,
        perturbation: Perturbation::zero(1),
        grid: grid.clone(),
        facts: facts(&[("k", 1.0), ("alpha", 1.0), ("eps", 0.0)]),
        tail_rate: 0.0,
    })
}

/// `diag(-1, +1)`: an exact saddle with unit constants.
pub fn build_saddle(grid: &TimeGrid) -> Result<Scenario> {
    let flow = LinearFlow::closed_form(2, grid.interval(), |t, s| {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (-(t - s)).exp(),
            (t - s).exp(),
        ]))
    });
    let projections = ProjectionFamily::constant(
        grid.clone(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
    )?;
    Ok(Scenario {
        name: "saddle_2x2".into(),
        flow,
        projections,
        perturbation: Perturbation::zero(2),
        grid: grid.clone(),
        facts: facts(&[("k", 1.0), ("alpha", 1.0), ("eps", 0.0)]),
        tail_rate: 0.0,
    })
}

/// The fractional-integral perturbed diagonal system on the positive half
/// line: `A = diag(a', b')` with `a = -t + sin t`, `b = t - cos t`, and
/// `B = diag(e^{-2 eps t} I^gamma sin, e^{-2 eps t} I^gamma cos)`.
pub fn build_example_sys(eps: f64, order: f64, grid: &TimeGrid) -> Result<Scenario> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("example_sys eps {eps} must be positive")));
    }
    if !(order > 0.0) {
        return Err(Error::Domain(format!("example_sys gamma {order} must be positive")));
    }
    if grid.interval() != Interval::HalfLinePlus || grid.t_min().abs() > 1e-12 {
        return Err(Error::Domain("example_sys needs a half-line grid starting at 0".into()));
    }
    let a = |t: f64| -t + t.sin();
    let b = |t: f64| t - t.cos();
    let flow = LinearFlow::closed_form(2, Interval::HalfLinePlus, move |t, s| {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (a(t) - a(s)).exp(),
            (b(t) - b(s)).exp(),
        ]))
    });
    let projections = ProjectionFamily::constant(
        grid.clone(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
    )?;

    let rl_sin = riemann_liouville(&FractionalIntegralSpec::new(order, f64::sin)?, grid)?;
    let rl_cos = riemann_liouville(&FractionalIntegralSpec::new(order, f64::cos)?, grid)?;
    let (t0, h) = (grid.t_min(), grid.step());
    let sin_vals: Arc<Vec<f64>> = Arc::new(rl_sin.values().to_vec());
    let cos_vals: Arc<Vec<f64>> = Arc::new(rl_cos.values().to_vec());
    let c_entry: ScalarFn = Arc::new(move |t: f64| {
        (-2.0 * eps * t).exp() * interp(&sin_vals, t0, h, t)
    });
    let d_entry: ScalarFn = Arc::new(move |t: f64| {
        (-2.0 * eps * t).exp() * interp(&cos_vals, t0, h, t)
    });
    let perturbation = Perturbation::diagonal(vec![c_entry, d_entry]);

    let e2 = std::f64::consts::E.powi(2);
    let c_gamma = 1.0 / gamma(order + 1.0);
    Ok(Scenario {
        name: "example_sys".into(),
        flow,
        projections,
        perturbation,
        grid: grid.clone(),
        facts: facts(&[
            ("k", e2),
            ("alpha", 1.0),
            ("eps", 0.0),
            ("c_gamma", c_gamma),
            ("gamma", order),
            ("pointwise_eps", eps),
        ]),
        // t^gamma e^{-2 eps t} is dominated beyond T by the rate below.
        tail_rate: -2.0 * eps + order / grid.t_max(),
    })
}

/// The oscillating slowly-decaying kernel `sin(xi^2) (1 + xi^2)^{-beta}`.
pub fn kernel_j(beta_k: f64, xi: f64) -> f64 {
    (xi * xi).sin() * (1.0 + xi * xi).powf(-beta_k)
}

/// Exact series for the neglected kernel-envelope mass
/// `int_{|xi| > cutoff} (1 + xi^2)^{-beta} dxi`.
pub fn kernel_tail_mass(beta_k: f64, cutoff: f64) -> f64 {
    // (1 + xi^2)^{-beta} = sum_k binom(-beta, k) xi^{-2 beta - 2k}.
    let mut total = 0.0;
    let mut coeff = 1.0;
    for k in 0..60 {
        let kf = k as f64;
        if k > 0 {
            coeff *= (-beta_k - (kf - 1.0)) / kf;
        }
        let power = 2.0 * beta_k + 2.0 * kf - 1.0;
        let term = coeff * cutoff.powf(-power) / power;
        total += term;
        if term.abs() < 1e-18 * total.abs().max(1e-300) {
            break;
        }
    }
    2.0 * total
}

/// Discretized convolution kernel and window for the nonlocal scenario.
#[derive(Debug, Clone)]
pub struct NonlocalKernel {
    pub beta_k: f64,
    pub xi_truncation: f64,
    pub xi_step: f64,
    /// Allowed neglected kernel mass beyond the truncation.
    pub mass_tolerance: f64,
}

impl NonlocalKernel {
    pub fn new(beta_k: f64, xi_truncation: f64, xi_step: f64, mass_tolerance: f64) -> Result<Self> {
        if !(beta_k > 0.5 && beta_k < 1.0) {
            return Err(Error::Domain(format!("kernel exponent {beta_k} must lie in (1/2, 1)")));
        }
        if !(xi_truncation > 0.0 && xi_step > 0.0) {
            return Err(Error::Domain("kernel window and step must be positive".into()));
        }
        Ok(NonlocalKernel { beta_k, xi_truncation, xi_step, mass_tolerance })
    }

    fn window_offsets(&self) -> usize {
        (self.xi_truncation / self.xi_step).round() as usize
    }

    /// Size of the shift-window state.
    pub fn window_len(&self) -> usize {
        2 * self.window_offsets() + 1
    }

    /// Convolution quadrature matrix: row i approximates
    /// `int J(xi) v(xi_i + xi) dxi` over the window, values outside the
    /// window treated as zero.
    pub fn convolution_matrix(&self) -> DMatrix<f64> {
        let half = self.window_offsets();
        let m = self.window_len();
        let mut c = DMatrix::zeros(m, m);
        for (j, col_weight) in (0..m).map(|j| {
            let xi = -self.xi_truncation + (j as f64) * self.xi_step;
            let w = if j == 0 || j == m - 1 { 0.5 * self.xi_step } else { self.xi_step };
            (j, w * kernel_j(self.beta_k, xi))
        }) {
            let offset = j as isize - half as isize;
            for i in 0..m {
                let k = i as isize + offset;
                if k >= 0 && (k as usize) < m {
                    c[(i, k as usize)] += col_weight;
                }
            }
        }
        c
    }

    /// Discrete l1 mass of the kernel over the window.
    pub fn discrete_mass(&self) -> f64 {
        let m = self.window_len();
        (0..m)
            .map(|j| {
                let xi = -self.xi_truncation + (j as f64) * self.xi_step;
                let w = if j == 0 || j == m - 1 { 0.5 * self.xi_step } else { self.xi_step };
                w * kernel_j(self.beta_k, xi).abs()
            })
            .sum()
    }
}

/// Time profile of the nonlocal perturbation weight.
#[derive(Debug, Clone, Copy)]
pub enum WeightProfile {
    Zero,
    /// `w(t) = min(w0, |t|^{-2 beta_k}) e^{-2 eps |t|}`.
    CappedPower { w0: f64, eps: f64 },
}

/// Desk-scale surrogate of the nonlocal integro-differential equation:
/// trajectory window state, scalar base flow `e^{a (t-s)} Id`, convolution
/// perturbation `B(t) = w(t) C`.
pub fn build_nonlocal_ide(
    kernel: &NonlocalKernel,
    profile: WeightProfile,
    base_rate: f64,
    grid: &TimeGrid,
) -> Result<Scenario> {
    if base_rate == 0.0 {
        return Err(Error::Domain("base rate must have a definite sign".into()));
    }
    let neglected = kernel_tail_mass(kernel.beta_k, kernel.xi_truncation);
    if neglected > kernel.mass_tolerance {
        return Err(Error::Domain(format!(
            "neglected kernel mass {neglected:.3e} exceeds the tolerance {:.3e}",
            kernel.mass_tolerance
        )));
    }
    let m = kernel.window_len();
    let flow = LinearFlow::closed_form(m, grid.interval(), move |t, s| {
        DMatrix::identity(m, m) * (base_rate * (t - s)).exp()
    });
    // Stable everywhere for a decaying base rate.
    let projections = if base_rate < 0.0 {
        ProjectionFamily::constant(grid.clone(), DMatrix::identity(m, m))?
    } else {
        ProjectionFamily::constant(grid.clone(), DMatrix::zeros(m, m))?
    };

    let beta_k = kernel.beta_k;
    let w: ScalarFn = match profile {
        WeightProfile::Zero => Arc::new(|_| 0.0),
        WeightProfile::CappedPower { w0, eps } => Arc::new(move |t: f64| {
            let cap = t.abs().powf(-2.0 * beta_k).min(w0);
            cap * (-2.0 * eps * t.abs()).exp()
        }),
    };
    let conv = kernel.convolution_matrix();
    let mass = kernel.discrete_mass();
    let perturbation = Perturbation::scaled_matrix(w, conv);

    let (w0, eps) = match profile {
        WeightProfile::Zero => (0.0, 0.0),
        WeightProfile::CappedPower { w0, eps } => (w0, eps),
    };
    Ok(Scenario {
        name: "nonlocal_ide".into(),
        flow,
        projections,
        perturbation,
        grid: grid.clone(),
        facts: facts(&[
            ("k", 1.0),
            ("alpha", base_rate.abs()),
            ("eps", 0.0),
            ("j_mass", mass),
            ("kernel_tail_mass", neglected),
            ("pointwise_eps", eps),
            ("pointwise_required_delta", w0 * mass),
            ("beta_k", beta_k),
        ]),
        tail_rate: -2.0 * eps,
    })
}

/// A catalog entry: scenario name, default parameters, and the analytic
/// facts those defaults imply.
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub defaults: BTreeMap<String, f64>,
    pub facts: BTreeMap<String, f64>,
}

/// Built-in scenarios with their defaults and closed-form facts.
pub fn catalog() -> Vec<ScenarioInfo> {
    let e2 = std::f64::consts::E.powi(2);
    vec![
        ScenarioInfo {
            name: "scalar_decay",
            summary: "x' = -x, unit dichotomy constants",
            defaults: BTreeMap::new(),
            facts: facts(&[("k", 1.0), ("alpha", 1.0), ("eps", 0.0)]),
        },
        ScenarioInfo {
            name: "saddle_2x2",
            summary: "diag(-1, +1) saddle, unit dichotomy constants",
            defaults: BTreeMap::new(),
            facts: facts(&[("k", 1.0), ("alpha", 1.0), ("eps", 0.0)]),
        },
        ScenarioInfo {
            name: "example_sys",
            summary: "diagonal system with fractional-integral perturbation",
            defaults: facts(&[("eps", 0.5), ("gamma", 1.0)]),
            facts: facts(&[("k", e2), ("alpha", 1.0), ("eps", 0.0), ("c_gamma", 1.0)]),
        },
        ScenarioInfo {
            name: "nonlocal_ide",
            summary: "shift-window surrogate of the oscillating-kernel convolution",
            defaults: facts(&[
                ("beta_k", 0.75),
                ("w0", 0.1),
                ("eps", 0.5),
                ("xi_truncation", 50.0),
                ("xi_step", 1.0),
                ("a", -1.0),
                ("mass_tolerance", 0.7),
            ]),
            facts: facts(&[("k", 1.0), ("eps", 0.0)]),
        },
    ]
}

/// Builds a catalog scenario by name with parameter overrides.
pub fn build_scenario(
    name: &str,
    params: &BTreeMap<String, f64>,
    grid: &TimeGrid,
) -> Result<Scenario> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    match name {
        "scalar_decay" => build_scalar_decay(grid),
        "saddle_2x2" => build_saddle(grid),
        "example_sys" => build_example_sys(get("eps", 0.5), get("gamma", 1.0), grid),
        "nonlocal_ide" => {
            let kernel = NonlocalKernel::new(
                get("beta_k", 0.75),
                get("xi_truncation", 50.0),
                get("xi_step", 1.0),
                get("mass_tolerance", 0.7),
            )?;
            let profile = WeightProfile::CappedPower {
                w0: get("w0", 0.1),
                eps: get("eps", 0.5),
            };
            build_nonlocal_ide(&kernel, profile, get("a", -1.0), grid)
        }
        other => Err(Error::Domain(format!("unknown scenario '{other}'"))),
    }
}
