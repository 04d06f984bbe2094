//! Geometry on the strategy simplex: ternary coordinates, a triangular grid,
//! strategy trajectories, flow fields and interpolated scalar fields.
//!
//! Grid nodes are indexed by `(i, j)` with `i + j <= n`, where `u = i h` is
//! the guessing share and `v = j h` the reasoning share. The ternary map
//! `x = u + v / 2`, `y = v * sqrt(3) / 2` places memorization at (0, 0),
//! guessing at (1, 0) and reasoning at (1/2, sqrt(3)/2).

mod flow;
mod projection;

pub use flow::{
    ensemble_average_flow, finite_difference_flow, interpolate_flow, trajectories, FlowSample,
    Trajectory,
};
pub use projection::{project_divergence_free, FlowField, ProjectionOptions, SolveStats, Solver};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

pub const SQRT3_2: f64 = 0.866_025_403_784_438_6;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint {
    pub p_m: f64,
    pub p_r: f64,
    pub p_g: f64,
}

impl SimplexPoint {
    pub fn new(p_m: f64, p_r: f64, p_g: f64) -> Result<Self> {
        let p = SimplexPoint { p_m, p_r, p_g };
        let sum = p_m + p_r + p_g;
        if [p_m, p_r, p_g].iter().any(|&x| !(x >= -SIMPLEX_TOLERANCE))
            || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
        {
            return Err(Error::invalid(format!("({p_m}, {p_r}, {p_g}) is not on the simplex")));
        }
        Ok(p)
    }

    pub fn to_cartesian(self) -> (f64, f64) {
        (self.p_g + 0.5 * self.p_r, SQRT3_2 * self.p_r)
    }

    /// Inverse ternary map. Points more than `1e-12` outside the triangle are
    /// rejected with their signed distances to the three edges (opposite
    /// M, R and G respectively; negative means outside).
    pub fn from_cartesian(x: f64, y: f64) -> Result<Self> {
        let p_r = y / SQRT3_2;
        let p_g = x - 0.5 * p_r;
        let p_m = 1.0 - p_g - p_r;
        let distances = [p_m * SQRT3_2, p_r * SQRT3_2, p_g * SQRT3_2];
        if distances.iter().any(|&d| d < -1e-12) {
            return Err(Error::OutsideTriangle { x, y, distances });
        }
        Ok(SimplexPoint { p_m, p_r, p_g })
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.p_m, self.p_r, self.p_g]
    }
}

impl From<crate::pmm::StrategyMix> for SimplexPoint {
    fn from(m: crate::pmm::StrategyMix) -> Self {
        SimplexPoint {
            p_m: m.p_m,
            p_r: m.p_r,
            p_g: m.p_g,
        }
    }
}

/// Triangular lattice covering the simplex with `n` steps per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    n: usize,
}

impl SimplexGrid {
    /// `h` must divide 1 into at least four steps.
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid(format!("grid spacing {h} must be positive")));
        }
        let n = (1.0 / h).round();
        if (n * h - 1.0).abs() > 1e-9 || n < 4.0 {
            return Err(Error::invalid(format!(
                "grid spacing {h} must be 1/n for an integer n >= 4"
            )));
        }
        Ok(SimplexGrid { n: n as usize })
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn len(&self) -> usize {
        (self.n + 1) * (self.n + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + j <= self.n);
        j * (self.n + 1) - j * j.saturating_sub(1) / 2 + i
    }

    /// Index of `(i, j)` if it lies on the grid.
    pub fn checked_index(&self, i: isize, j: isize) -> Option<usize> {
        (i >= 0 && j >= 0 && (i + j) as usize <= self.n).then(|| self.index(i as usize, j as usize))
    }

    /// All `(i, j)` in index order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.n).flat_map(move |j| (0..=self.n - j).map(move |i| (i, j)))
    }

    pub fn point(&self, i: usize, j: usize) -> SimplexPoint {
        let h = self.h();
        let (u, v) = (i as f64 * h, j as f64 * h);
        SimplexPoint {
            p_m: (1.0 - u - v).max(0.0),
            p_r: v,
            p_g: u,
        }
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + j == self.n
    }

    pub fn is_vertex(&self, i: usize, j: usize) -> bool {
        (i, j) == (0, 0) || (i, j) == (self.n, 0) || (i, j) == (0, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScalarKind {
    Accuracy,
    Entropy { k: usize },
}

impl ScalarKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            ScalarKind::Accuracy => (0.0, 1.0),
            ScalarKind::Entropy { k } => (0.0, (k as f64).log2()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarKind::Accuracy => "accuracy",
            ScalarKind::Entropy { .. } => "entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: SimplexGrid,
    pub kind: ScalarKind,
    pub values: Vec<f64>,
}

/// Inverse-distance weights (power 2) at `(x, y)` over `sites`. A query that
/// coincides with one or more sites returns equal weight on just those.
pub(crate) fn idw_weights(sites: &[(f64, f64)], x: f64, y: f64) -> Vec<f64> {
    let d2: Vec<f64> = sites
        .iter()
        .map(|&(sx, sy)| (sx - x).powi(2) + (sy - y).powi(2))
        .collect();
    if d2.iter().any(|&d| d < 1e-24) {
        let hits = d2.iter().filter(|&&d| d < 1e-24).count() as f64;
        return d2.iter().map(|&d| if d < 1e-24 { 1.0 / hits } else { 0.0 }).collect();
    }
    let w: Vec<f64> = d2.iter().map(|d| 1.0 / d).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn interpolate_scalar(
    samples: &[(SimplexPoint, f64)],
    kind: ScalarKind,
    h: f64,
    exec: Execution,
) -> Result<ScalarField> {
    if samples.is_empty() {
        return Err(Error::invalid("scalar interpolation needs at least one sample"));
    }
    let (lo, hi) = kind.range();
    if let Some((_, v)) = samples
        .iter()
        .find(|(_, v)| !(*v >= lo - 1e-12 && *v <= hi + 1e-12))
    {
        return Err(Error::invalid(format!(
            "{} sample {v} outside [{lo}, {hi}]",
            kind.name()
        )));
    }
    let grid = SimplexGrid::new(h)?;
    let sites: Vec<(f64, f64)> = samples.iter().map(|(p, _)| p.to_cartesian()).collect();
    let nodes: Vec<(usize, usize)> = grid.nodes().collect();
    let values = exec::map(exec, &nodes, |&(i, j)| {
        let (x, y) = grid.point(i, j).to_cartesian();
        idw_weights(&sites, x, y)
            .iter()
            .zip(samples)
            .map(|(w, (_, v))| w * v)
            .sum::<f64>()
            .clamp(lo, hi)
    });
    Ok(ScalarField { grid, kind, values })
}

/// Interpolated value at an arbitrary point, with the same weighting as the
/// grid version.
pub fn idw_at(samples: &[(SimplexPoint, f64)], at: SimplexPoint) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let sites: Vec<(f64, f64)> = samples.iter().map(|(p, _)| p.to_cartesian()).collect();
    let (x, y) = at.to_cartesian();
    Some(
        idw_weights(&sites, x, y)
            .iter()
            .zip(samples)
            .map(|(w, (_, v))| w * v)
            .sum(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ternary_conventions() {
        let m = SimplexPoint::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(m.to_cartesian(), (0.0, 0.0));
        let g = SimplexPoint::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(g.to_cartesian(), (1.0, 0.0));
        let r = SimplexPoint::new(0.0, 1.0, 0.0).unwrap().to_cartesian();
        assert!((r.0 - 0.5).abs() < 1e-15 && (r.1 - 3f64.sqrt() / 2.0).abs() < 1e-15);
        let c = SimplexPoint::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap().to_cartesian();
        assert!((c.0 - 0.5).abs() < 1e-15 && (c.1 - 3f64.sqrt() / 6.0).abs() < 1e-15);
    }

    #[test]
    fn outside_points_report_distances() {
        match SimplexPoint::from_cartesian(0.5, -0.1) {
            Err(Error::OutsideTriangle { distances, .. }) => assert!(distances[1] < 0.0),
            other => panic!("{other:?}"),
        }
        assert!(SimplexPoint::new(0.5, 0.6, 0.0).is_err());
    }

    #[test]
    fn grid_indexing() {
        let g = SimplexGrid::new(0.25).unwrap();
        assert_eq!(g.len(), 15);
        let idx: Vec<usize> = g.nodes().map(|(i, j)| g.index(i, j)).collect();
        assert_eq!(idx, (0..15).collect::<Vec<_>>());
        assert_eq!(g.checked_index(4, 1), None);
        assert_eq!(g.checked_index(-1, 0), None);
        assert!(g.is_vertex(0, 4) && g.is_boundary(2, 2) && !g.is_boundary(1, 1));
        assert!(SimplexGrid::new(0.3).is_err());
        assert!(SimplexGrid::new(0.5).is_err());
    }

    #[test]
    fn idw_single_site_and_exactness() {
        let c = SimplexPoint::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let f = interpolate_scalar(&[(c, 0.7)], ScalarKind::Accuracy, 0.1, Execution::Sequential).unwrap();
        assert!(f.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let s = vec![
            (SimplexPoint::new(1.0, 0.0, 0.0).unwrap(), 0.2),
            (SimplexPoint::new(0.5, 0.5, 0.0).unwrap(), 0.9),
            (SimplexPoint::new(0.0, 0.0, 1.0).unwrap(), 0.4),
        ];
        let f = interpolate_scalar(&s, ScalarKind::Accuracy, 0.1, Execution::Parallel).unwrap();
        assert_eq!(f.values[f.grid.index(0, 0)], 0.2);
        assert_eq!(f.values[f.grid.index(0, 5)], 0.9);
        assert_eq!(idw_at(&s, s[2].0), Some(0.4));
        assert!(interpolate_scalar(&[], ScalarKind::Accuracy, 0.1, Execution::Sequential).is_err());
        assert!(interpolate_scalar(
            &[(c, 2.5)],
            ScalarKind::Entropy { k: 4 },
            0.1,
            Execution::Sequential
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn ternary_round_trip(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (p_m, p_r) = if a + b <= 1.0 { (a, b) } else { (1.0 - a, 1.0 - b) };
            let p = SimplexPoint::new(p_m, p_r, 1.0 - p_m - p_r).unwrap();
            let (x, y) = p.to_cartesian();
            let q = SimplexPoint::from_cartesian(x, y).unwrap();
            for (s, t) in p.as_array().iter().zip(q.as_array()) {
                prop_assert!((s - t).abs() < 1e-12);
            }
        }

        #[test]
        fn scalar_field_respects_range(vals in proptest::collection::vec(0.0f64..=2.0, 3..12)) {
            let samples: Vec<_> = vals.iter().enumerate().map(|(i, &v)| {
                let t = i as f64 / vals.len() as f64;
                (SimplexPoint::new(t * 0.5, 1.0 - t, t * 0.5).unwrap(), v)
            }).collect();
            let f = interpolate_scalar(&samples, ScalarKind::Entropy { k: 4 }, 0.1, Execution::Sequential).unwrap();
            prop_assert!(f.values.iter().all(|&v| (0.0..=2.0).contains(&v)));
        }
    }
}
