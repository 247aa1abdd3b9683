//! Time and space discretizations.

use crate::error::{Error, Result};
use crate::real::Real;

/// Strictly increasing time nodes `0 = t_0 < ... < t_M = T`, `M >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    nodes: Vec<S>,
}

impl<S: Real> TimeGrid<S> {
    pub fn uniform(horizon: S, steps: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 time steps, got {steps}")));
        }
        let m = S::from_count(steps);
        let mut nodes: Vec<S> = (0..=steps).map(|i| horizon * S::from_count(i) / m).collect();
        nodes[steps] = horizon;
        Ok(Self { nodes })
    }

    /// Steps grow by `ratio` from one interval to the next (`ratio < 1` refines near `T`).
    pub fn geometric(horizon: S, steps: usize, ratio: S) -> Result<Self> {
        check_horizon(horizon)?;
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 time steps, got {steps}")));
        }
        if !(ratio > S::zero()) || !ratio.is_finite() {
            return Err(Error::InvalidGrid("geometric ratio must be positive and finite".into()));
        }
        if (ratio - S::one()).abs() < S::lit(1e-12) {
            return Self::uniform(horizon, steps);
        }
        let total = (S::one() - ratio.powi(steps as i32)) / (S::one() - ratio);
        let first = horizon / total;
        let mut nodes = Vec::with_capacity(steps + 1);
        let mut t = S::zero();
        let mut dt = first;
        nodes.push(t);
        for _ in 1..steps {
            t += dt;
            nodes.push(t);
            dt *= ratio;
        }
        nodes.push(horizon);
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<S>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidGrid("need at least 3 time nodes".into()));
        }
        if nodes[0] != S::zero() {
            return Err(Error::InvalidGrid("time grid must start at 0".into()));
        }
        for w in nodes.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid("time nodes must be finite and strictly increasing".into()));
            }
        }
        Ok(Self { nodes })
    }

    #[inline]
    pub fn nodes(&self) -> &[S] {
        &self.nodes
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of intervals `M`.
    #[inline]
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    #[inline]
    pub fn horizon(&self) -> S {
        self.nodes[self.nodes.len() - 1]
    }

    #[inline]
    pub fn step(&self, i: usize) -> S {
        self.nodes[i + 1] - self.nodes[i]
    }

    #[inline]
    pub fn is_uniform(&self) -> bool {
        let h0 = self.step(0);
        (0..self.steps()).all(|i| (self.step(i) - h0).abs() <= S::lit(1e-9) * h0.max(S::one()))
    }

    /// Interval index `i` and weight `w` with `t = (1 - w) t_i + w t_{i+1}`.
    pub fn locate(&self, t: S) -> Option<(usize, S)> {
        let tol = S::lit(1e-12) * self.horizon().max(S::one());
        if t < -tol || t > self.horizon() + tol || t.is_nan() {
            return None;
        }
        let t = t.max(S::zero()).min(self.horizon());
        let m = self.steps();
        let i = match self.nodes.binary_search_by(|n| n.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(m - 1),
            Err(i) => (i - 1).min(m - 1),
        };
        Some((i, (t - self.nodes[i]) / self.step(i)))
    }

    /// Keeps every `factor`-th node; the step count must be divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps()
            )));
        }
        Self::from_nodes(self.nodes.iter().step_by(factor).copied().collect())
    }
}

fn check_horizon<S: Real>(horizon: S) -> Result<()> {
    if horizon > S::zero() && horizon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")))
    }
}

/// Uniform nodes on `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid<S> {
    x_min: S,
    x_max: S,
    len: usize,
}

impl<S: Real> SpaceGrid<S> {
    pub fn new(x_min: S, x_max: S, len: usize) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if len < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 space nodes, got {len}")));
        }
        Ok(Self { x_min, x_max, len })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn x_min(&self) -> S {
        self.x_min
    }

    #[inline]
    pub fn x_max(&self) -> S {
        self.x_max
    }

    #[inline]
    pub fn spacing(&self) -> S {
        (self.x_max - self.x_min) / S::from_count(self.len - 1)
    }

    #[inline]
    pub fn node(&self, i: usize) -> S {
        if i + 1 == self.len {
            self.x_max
        } else {
            self.x_min + self.spacing() * S::from_count(i)
        }
    }

    pub fn nodes(&self) -> Vec<S> {
        (0..self.len).map(|i| self.node(i)).collect()
    }

    #[inline]
    pub fn contains(&self, x: S) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Interval index and weight, as for [`TimeGrid::locate`].
    pub fn locate(&self, x: S) -> Option<(usize, S)> {
        if !self.contains(x) {
            return None;
        }
        let s = (x - self.x_min) / self.spacing();
        let i = s.floor().to_usize().unwrap_or(0).min(self.len - 2);
        Some((i, s - S::from_count(i)))
    }

    /// Indices of nodes inside `[lo, hi]`.
    pub fn indices_within(&self, lo: S, hi: S) -> Vec<usize> {
        let eps = self.spacing() * S::lit(1e-9);
        (0..self.len)
            .filter(|&i| {
                let x = self.node(i);
                x >= lo - eps && x <= hi + eps
            })
            .collect()
    }

    /// Same interval, `2(len - 1) + 1` nodes.
    pub fn refined(&self) -> Self {
        Self { x_min: self.x_min, x_max: self.x_max, len: 2 * (self.len - 1) + 1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_endpoints_exact() {
        let g = TimeGrid::<f64>::uniform(1.3, 7).unwrap();
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.horizon(), 1.3);
        assert_eq!(g.steps(), 7);
        assert!(g.is_uniform());
    }

    #[test]
    fn geometric_is_increasing_with_exact_endpoints() {
        let g = TimeGrid::<f64>::geometric(2.0, 20, 0.9).unwrap();
        assert_eq!(g.horizon(), 2.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(g.step(19) < g.step(0));
        assert!(!g.is_uniform());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::<f64>::uniform(1.0, 1).is_err());
        assert!(TimeGrid::<f64>::uniform(0.0, 10).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(SpaceGrid::<f64>::new(1.0, -1.0, 10).is_err());
        assert!(SpaceGrid::<f64>::new(-1.0, 1.0, 2).is_err());
    }

    #[test]
    fn locate_brackets_points() {
        let g = TimeGrid::<f64>::uniform(1.0, 4).unwrap();
        assert_eq!(g.locate(0.0), Some((0, 0.0)));
        let (i, w) = g.locate(0.6).unwrap();
        assert_eq!(i, 2);
        assert!((w - 0.4).abs() < 1e-12);
        assert_eq!(g.locate(1.0), Some((3, 1.0)));
        assert!(g.locate(1.1).is_none());

        let x = SpaceGrid::<f64>::new(-1.0, 1.0, 5).unwrap();
        assert_eq!(x.spacing(), 0.5);
        let (i, w) = x.locate(0.25).unwrap();
        assert_eq!(i, 2);
        assert!((w - 0.5).abs() < 1e-12);
        assert_eq!(x.locate(1.0).unwrap().0, 3);
        assert!(x.locate(1.5).is_none());
    }

    #[test]
    fn coarsen_and_refine() {
        let g = TimeGrid::<f64>::uniform(1.0, 8).unwrap();
        let c = g.coarsen(4).unwrap();
        assert_eq!(c.nodes(), &[0.0, 0.5, 1.0]);
        assert!(g.coarsen(3).is_err());
        let x = SpaceGrid::new(-6.0, 6.0, 401).unwrap().refined();
        assert_eq!(x.len(), 801);
        assert_eq!(x.indices_within(-2.0, 2.0).len(), 267);
    }
}
