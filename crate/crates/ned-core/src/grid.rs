//! Uniform time grids and functions sampled on them.
//!
//! Every weighted norm and every quadrature in the crate is taken over a
//! [`TimeGrid`]. Grids are uniform by construction; the node count is pinned
//! at construction time and degenerate (single-node) grids are rejected.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which real interval the grid discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interval {
    FullLine,
    HalfLinePlus,
    HalfLineMinus,
}

impl Interval {
    /// Interval obtained under the reflection t -> -t.
    pub fn reflected(self) -> Interval {
        match self {
            Interval::FullLine => Interval::FullLine,
            Interval::HalfLinePlus => Interval::HalfLineMinus,
            Interval::HalfLineMinus => Interval::HalfLinePlus,
        }
    }
}

/// Uniform grid on `[t_min, t_max]` with step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_min: f64,
    t_max: f64,
    h: f64,
    len: usize,
    interval: Interval,
}

impl TimeGrid {
    /// Builds a grid; `(t_max - t_min) / h` must be an integer within 1e-8.
    pub fn new(t_min: f64, t_max: f64, h: f64, interval: Interval) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && h.is_finite()) {
            return Err(Error::InvalidGrid("non-finite bounds or step".into()));
        }
        if t_min >= t_max {
            return Err(Error::InvalidGrid(format!(
                "t_min = {t_min} must be below t_max = {t_max}"
            )));
        }
        if h <= 0.0 {
            return Err(Error::InvalidGrid(format!("step h = {h} must be positive")));
        }
        let panels_f = (t_max - t_min) / h;
        let panels = panels_f.round();
        if (panels_f - panels).abs() > 1e-8 * panels.max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "step h = {h} does not divide the span {}",
                t_max - t_min
            )));
        }
        let len = panels as usize + 1;
        if len < 2 {
            return Err(Error::DegenerateGrid);
        }
        match interval {
            Interval::HalfLinePlus if t_min < -1e-12 => {
                return Err(Error::InvalidGrid("half-line-plus grid starts below 0".into()))
            }
            Interval::HalfLineMinus if t_max > 1e-12 => {
                return Err(Error::InvalidGrid("half-line-minus grid ends above 0".into()))
            }
            _ => {}
        }
        Ok(TimeGrid { t_min, t_max, h, len, interval })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i < self.len);
        self.t_min + (i as f64) * self.h
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.node(i))
    }

    /// Index of the node equal to `t` (within 1e-9 relative to the step).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = ((t - self.t_min) / self.h).round();
        if i < 0.0 || i >= self.len as f64 {
            return Err(Error::NotOnGrid(t));
        }
        let i = i as usize;
        if (self.node(i) - t).abs() > 1e-9 * self.h.max(1.0) {
            return Err(Error::NotOnGrid(t));
        }
        Ok(i)
    }

    /// Index of the node closest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = ((t - self.t_min) / self.h).round();
        if i < 0.0 {
            0
        } else if i >= self.len as f64 {
            self.len - 1
        } else {
            i as usize
        }
    }

    /// Grid for the reflected problem: nodes are the negated originals.
    pub fn reflected(&self) -> TimeGrid {
        TimeGrid {
            t_min: -self.t_max,
            t_max: -self.t_min,
            h: self.h,
            len: self.len,
            interval: self.interval.reflected(),
        }
    }

    pub fn same_nodes_as(&self, other: &TimeGrid) -> bool {
        self.len == other.len
            && (self.t_min - other.t_min).abs() <= 1e-9 * self.h
            && (self.h - other.h).abs() <= 1e-12 * self.h
    }

    /// Which grid ends truncate the underlying interval J (as opposed to
    /// being genuine endpoints of J, like 0 on a half line).
    pub fn truncation_sides(&self) -> (bool, bool) {
        match self.interval {
            Interval::FullLine => (true, true),
            Interval::HalfLinePlus => (self.t_min > 1e-12, true),
            Interval::HalfLineMinus => (true, self.t_max < -1e-12),
        }
    }
}

/// Values carried by a [`GridFunction`].
pub trait GridValue: Clone {
    /// The l1 norm for vectors, the induced l1 operator norm for matrices.
    fn value_norm(&self) -> f64;
    fn is_finite_value(&self) -> bool;
}

impl GridValue for f64 {
    fn value_norm(&self) -> f64 {
        self.abs()
    }
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl GridValue for DVector<f64> {
    fn value_norm(&self) -> f64 {
        crate::linalg::l1_vector_norm(self)
    }
    fn is_finite_value(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl GridValue for DMatrix<f64> {
    fn value_norm(&self) -> f64 {
        crate::linalg::l1_operator_norm(self)
    }
    fn is_finite_value(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// A function sampled on every node of a grid.
#[derive(Debug, Clone)]
pub struct GridFunction<T: GridValue> {
    grid: TimeGrid,
    values: Vec<T>,
}

pub type ScalarGridFunction = GridFunction<f64>;
pub type VectorGridFunction = GridFunction<DVector<f64>>;

impl<T: GridValue> GridFunction<T> {
    pub fn new(grid: TimeGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite_value()) {
            return Err(Error::NonFinite("grid function values"));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn sample(grid: TimeGrid, f: impl Fn(f64) -> T) -> Result<Self> {
        let values = grid.nodes().map(&f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &T {
        &self.values[i]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.value_norm()).collect()
    }

    pub fn map<U: GridValue>(&self, f: impl Fn(&T) -> U) -> Result<GridFunction<U>> {
        GridFunction::new(self.grid.clone(), self.values.iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_matches_round_formula() {
        let g = TimeGrid::new(0.0, 1.0, 0.1, Interval::HalfLinePlus).unwrap();
        assert_eq!(g.len(), 11);
        assert!((g.node(10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_node_grid() {
        // A span below one step rounds to zero panels.
        assert!(matches!(
            TimeGrid::new(0.0, 1e-12, 1.0, Interval::FullLine),
            Err(Error::DegenerateGrid)
        ));
        assert!(TimeGrid::new(0.0, 0.0, 0.1, Interval::FullLine).is_err());
    }

    #[test]
    fn rejects_step_not_dividing_span() {
        assert!(TimeGrid::new(0.0, 1.0, 0.3, Interval::FullLine).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let g = TimeGrid::new(-2.0, 2.0, 0.25, Interval::FullLine).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index_of(g.node(i)).unwrap(), i);
        }
        assert!(g.index_of(0.1).is_err());
    }

    #[test]
    fn reflection_mirrors_nodes() {
        let g = TimeGrid::new(-3.0, 0.0, 0.5, Interval::HalfLineMinus).unwrap();
        let r = g.reflected();
        assert_eq!(r.interval(), Interval::HalfLinePlus);
        for i in 0..g.len() {
            let mirrored = -g.node(g.len() - 1 - i);
            assert!((r.node(i) - mirrored).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_function_checks_length_and_finiteness() {
        let g = TimeGrid::new(0.0, 1.0, 0.5, Interval::HalfLinePlus).unwrap();
        assert!(GridFunction::new(g.clone(), vec![1.0, 2.0]).is_err());
        assert!(GridFunction::new(g.clone(), vec![1.0, f64::NAN, 3.0]).is_err());
        assert!(GridFunction::new(g, vec![1.0, 2.0, 3.0]).is_ok());
    }
}
