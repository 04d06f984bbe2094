//! Divergence-free projection of a tangent field on the simplex grid.
//!
//! A field `F` is split as `F = grad(phi) + S` with `div S = 0`. Vectors are
//! held by their `(u, v)` components; the gradient in those coordinates is
//! the metric `[[4/3, -2/3], [-2/3, 4/3]]` applied to the coordinate partials.
//! Partials use the two-point central difference where both neighbours exist
//! and the three-point one-sided formula otherwise (lines that run out of
//! nodes fall back to the third lattice direction `u - v`), so the operator is
//! exact for quadratic potentials.
//!
//! `phi` is fixed on the boundary to the running integral of the tangential
//! component of `F` minus its mean circulation. Any affine field then splits
//! exactly: a rigid rotation about the centroid has constant tangential
//! component and gets `phi = 0`, and a pure source is reproduced by `phi`.

use serde::{Deserialize, Serialize};

use super::{SimplexGrid, SQRT3_2};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

type Row = Vec<(usize, f64)>;

fn combine(parts: &[(f64, &Row)]) -> Row {
    let mut out: Row = Vec::new();
    for &(scale, row) in parts {
        for &(c, v) in row {
            out.push((c, scale * v));
        }
    }
    out.sort_by_key(|&(c, _)| c);
    let mut merged: Row = Vec::with_capacity(out.len());
    for (c, v) in out {
        match merged.last_mut() {
            Some((lc, lv)) if *lc == c => *lv += v,
            _ => merged.push((c, v)),
        }
    }
    merged.retain(|&(_, v)| v != 0.0);
    merged
}

fn dot(row: &Row, x: &[f64]) -> f64 {
    row.iter().map(|&(c, v)| v * x[c]).sum()
}

/// Second-order derivative along lattice step `d` at `(i, j)`.
fn directional(grid: &SimplexGrid, i: usize, j: usize, d: (isize, isize)) -> Option<Row> {
    let (i, j) = (i as isize, j as isize);
    let at = |s: isize| grid.checked_index(i + s * d.0, j + s * d.1);
    let inv = 1.0 / (2.0 * grid.h());
    let here = at(0)?;
    if let (Some(p), Some(m)) = (at(1), at(-1)) {
        return Some(vec![(p, inv), (m, -inv)]);
    }
    if let (Some(p1), Some(p2)) = (at(1), at(2)) {
        return Some(vec![(here, -3.0 * inv), (p1, 4.0 * inv), (p2, -inv)]);
    }
    if let (Some(m1), Some(m2)) = (at(-1), at(-2)) {
        return Some(vec![(here, 3.0 * inv), (m1, -4.0 * inv), (m2, inv)]);
    }
    None
}

/// Rows computing `(d/du, d/dv)` at every node.
fn gradient_rows(grid: &SimplexGrid) -> Result<(Vec<Row>, Vec<Row>)> {
    let mut du = Vec::with_capacity(grid.len());
    let mut dv = Vec::with_capacity(grid.len());
    for (i, j) in grid.nodes() {
        let eu = directional(grid, i, j, (1, 0));
        let ev = directional(grid, i, j, (0, 1));
        let ew = directional(grid, i, j, (1, -1));
        let (a, b) = match (eu, ev, ew) {
            (Some(a), Some(b), _) => (a, b),
            (Some(a), None, Some(w)) => {
                let b = combine(&[(1.0, &a), (-1.0, &w)]);
                (a, b)
            }
            (None, Some(b), Some(w)) => (combine(&[(1.0, &w), (1.0, &b)]), b),
            _ => {
                return Err(Error::Degenerate(format!(
                    "no gradient stencil at node ({i}, {j})"
                )))
            }
        };
        du.push(a);
        dv.push(b);
    }
    Ok((du, dv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    GaussSeidel,
    BiCgStab,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub solver: Solver,
    pub iterations: usize,
    /// Max-norm residual relative to `max(1, |rhs|_inf)`.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Multicolour Gauss–Seidel whose colour classes are updated concurrently.
    pub parallel: bool,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            tolerance: 1e-8,
            max_iterations: 10_000,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: SimplexGrid,
    /// Per-node rate of change of the guessing share.
    pub du: Vec<f64>,
    /// Per-node rate of change of the reasoning share.
    pub dv: Vec<f64>,
    /// Divergence times `h`; `None` at the three vertices.
    pub divergence_residual: Vec<Option<f64>>,
    pub stats: Option<SolveStats>,
}

impl FlowField {
    /// `(dp_m, dp_r, dp_g)`, summing to zero.
    pub fn tangent(&self, idx: usize) -> [f64; 3] {
        [-self.du[idx] - self.dv[idx], self.dv[idx], self.du[idx]]
    }

    pub fn cartesian(&self, idx: usize) -> (f64, f64) {
        (self.du[idx] + 0.5 * self.dv[idx], SQRT3_2 * self.dv[idx])
    }

    pub fn max_interior_residual(&self) -> f64 {
        self.grid
            .nodes()
            .enumerate()
            .filter(|&(_, (i, j))| !self.grid.is_boundary(i, j))
            .filter_map(|(idx, _)| self.divergence_residual[idx])
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn residuals(grid: &SimplexGrid, gu: &[Row], gv: &[Row], du: &[f64], dv: &[f64]) -> Vec<Option<f64>> {
    let h = grid.h();
    grid.nodes()
        .enumerate()
        .map(|(idx, (i, j))| {
            (!grid.is_vertex(i, j)).then(|| h * (dot(&gu[idx], du) + dot(&gv[idx], dv)))
        })
        .collect()
}

/// Boundary nodes in counter-clockwise order M -> G -> R, each once.
fn boundary_loop(grid: &SimplexGrid) -> Vec<(usize, (f64, f64))> {
    let n = grid.steps();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.push((grid.index(i, 0), (1.0, 0.0)));
    }
    for j in 0..n {
        out.push((grid.index(n - j, j), (-0.5, SQRT3_2)));
    }
    for j in (1..=n).rev() {
        out.push((grid.index(0, j), (-0.5, -SQRT3_2)));
    }
    out
}

/// Boundary potential: integral of the tangential component less its mean.
fn boundary_potential(grid: &SimplexGrid, du: &[f64], dv: &[f64]) -> Vec<f64> {
    let h = grid.h();
    let lp = boundary_loop(grid);
    let tangential = |idx: usize, t: (f64, f64)| {
        let (vx, vy) = (du[idx] + 0.5 * dv[idx], SQRT3_2 * dv[idx]);
        vx * t.0 + vy * t.1
    };
    let segments: Vec<f64> = (0..lp.len())
        .map(|s| {
            let (a, t) = lp[s];
            let b = lp[(s + 1) % lp.len()].0;
            0.5 * h * (tangential(a, t) + tangential(b, t))
        })
        .collect();
    let mean = segments.iter().sum::<f64>() / segments.len() as f64;
    let mut g = vec![0.0; grid.len()];
    let mut acc = 0.0;
    for (s, seg) in segments.iter().enumerate().take(lp.len() - 1) {
        acc += seg - mean;
        g[lp[s + 1].0] = acc;
    }
    g
}

struct System {
    /// Node index of each unknown.
    unknowns: Vec<usize>,
    rows: Vec<Row>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

impl System {
    fn residual(&self, phi: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| (b - dot(r, phi)).abs())
            .fold(0.0, f64::max)
    }

    fn relax(&self, r: usize, phi: &[f64]) -> f64 {
        let node = self.unknowns[r];
        let off: f64 = self.rows[r]
            .iter()
            .filter(|&&(c, _)| c != node)
            .map(|&(c, v)| v * phi[c])
            .sum();
        (self.rhs[r] - off) / self.diag[r]
    }
}

/// Greedy colouring so that no row couples two unknowns of one colour.
fn colour_classes(sys: &System, n_nodes: usize) -> Vec<Vec<usize>> {
    let mut row_of = vec![usize::MAX; n_nodes];
    for (r, &node) in sys.unknowns.iter().enumerate() {
        row_of[node] = r;
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); sys.unknowns.len()];
    for (r, row) in sys.rows.iter().enumerate() {
        for &(c, _) in row {
            let s = row_of[c];
            if s != usize::MAX && s != r {
                adj[r].push(s);
                adj[s].push(r);
            }
        }
    }
    let mut colour = vec![usize::MAX; sys.unknowns.len()];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for r in 0..sys.unknowns.len() {
        let used: Vec<usize> = adj[r].iter().map(|&s| colour[s]).collect();
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        colour[r] = c;
        if c == classes.len() {
            classes.push(Vec::new());
        }
        classes[c].push(r);
    }
    classes
}

fn gauss_seidel(
    sys: &System,
    phi: &mut [f64],
    opts: &ProjectionOptions,
    scale: f64,
    exec: Execution,
) -> SolveStats {
    let classes = opts.parallel.then(|| colour_classes(sys, phi.len()));
    let initial = sys.residual(phi) / scale;
    let mut residual = initial;
    let mut iterations = 0;
    while residual > opts.tolerance && iterations < opts.max_iterations {
        match &classes {
            None => {
                for r in 0..sys.unknowns.len() {
                    phi[sys.unknowns[r]] = sys.relax(r, phi);
                }
            }
            Some(classes) => {
                for class in classes {
                    let snapshot: &[f64] = phi;
                    let updated = exec::map(exec, class, |&r| sys.relax(r, snapshot));
                    for (&r, v) in class.iter().zip(updated) {
                        phi[sys.unknowns[r]] = v;
                    }
                }
            }
        }
        iterations += 1;
        // the residual costs as much as a sweep; check it every few sweeps
        if iterations % 10 == 0 || iterations == opts.max_iterations {
            residual = sys.residual(phi) / scale;
            if !residual.is_finite() || residual > 1e6 * initial.max(1.0) {
                break;
            }
        }
    }
    SolveStats {
        solver: Solver::GaussSeidel,
        iterations,
        residual,
        converged: residual <= opts.tolerance,
    }
}

fn bicgstab(sys: &System, phi: &mut [f64], opts: &ProjectionOptions, scale: f64) -> SolveStats {
    let m = sys.unknowns.len();
    let mut full = phi.to_vec();
    let apply = |x: &[f64], full: &mut Vec<f64>| -> Vec<f64> {
        for (r, &node) in sys.unknowns.iter().enumerate() {
            full[node] = x[r];
        }
        sys.rows.iter().map(|row| dot(row, full)).collect()
    };
    // Jacobi-preconditioned on the right
    let precond = |x: &[f64]| -> Vec<f64> { x.iter().zip(&sys.diag).map(|(a, d)| a / d).collect() };
    let mut x: Vec<f64> = sys.unknowns.iter().map(|&n| phi[n]).collect();
    let ax = apply(&x, &mut full);
    let mut r: Vec<f64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; m];
    let mut p = vec![0.0; m];
    let norm = |a: &[f64]| a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let ddot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut iterations = 0;
    let mut residual = norm(&r) / scale;
    while residual > opts.tolerance && iterations < opts.max_iterations {
        let rho_new = ddot(&r0, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..m {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        v = apply(&ph, &mut full);
        alpha = rho / ddot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(a, b)| a - alpha * b).collect();
        let sh = precond(&s);
        let t = apply(&sh, &mut full);
        let tt = ddot(&t, &t);
        omega = if tt > 0.0 { ddot(&t, &s) / tt } else { 0.0 };
        for i in 0..m {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        iterations += 1;
        residual = norm(&r) / scale;
        if omega == 0.0 || !residual.is_finite() {
            break;
        }
    }
    for (r, &node) in sys.unknowns.iter().enumerate() {
        phi[node] = x[r];
    }
    // report the true residual, not the recursively updated one
    let residual = sys.residual(phi) / scale;
    SolveStats {
        solver: Solver::BiCgStab,
        iterations,
        residual,
        converged: residual <= opts.tolerance,
    }
}

/// Remove the gradient part of a grid field, returning its solenoidal part.
///
/// Gauss–Seidel runs first; if it stalls or diverges the system is re-solved
/// with Jacobi-preconditioned BiCGSTAB.
pub fn project_divergence_free(
    grid: &SimplexGrid,
    du: &[f64],
    dv: &[f64],
    opts: &ProjectionOptions,
    exec: Execution,
) -> Result<FlowField> {
    if du.len() != grid.len() || dv.len() != grid.len() {
        return Err(Error::invalid(format!(
            "field has {}/{} values for a {}-node grid",
            du.len(),
            dv.len(),
            grid.len()
        )));
    }
    let (gu, gv) = gradient_rows(grid)?;
    // metric-weighted gradient rows: contravariant (u, v) components of grad phi
    let wu: Vec<Row> = (0..grid.len())
        .map(|n| combine(&[(4.0 / 3.0, &gu[n]), (-2.0 / 3.0, &gv[n])]))
        .collect();
    let wv: Vec<Row> = (0..grid.len())
        .map(|n| combine(&[(-2.0 / 3.0, &gu[n]), (4.0 / 3.0, &gv[n])]))
        .collect();

    let interior: Vec<usize> = grid
        .nodes()
        .enumerate()
        .filter(|&(_, (i, j))| !grid.is_boundary(i, j))
        .map(|(idx, _)| idx)
        .collect();
    let rows: Vec<Row> = exec::map(exec, &interior, |&node| {
        let mut parts: Vec<(f64, &Row)> = Vec::new();
        for &(m, c) in &gu[node] {
            parts.push((c, &wu[m]));
        }
        for &(m, c) in &gv[node] {
            parts.push((c, &wv[m]));
        }
        combine(&parts)
    });
    let diag: Vec<f64> = rows
        .iter()
        .zip(&interior)
        .map(|(row, &node)| row.iter().find(|&&(c, _)| c == node).map_or(0.0, |&(_, v)| v))
        .collect();
    if diag.iter().any(|&d| d == 0.0) {
        return Err(Error::Degenerate("projection operator has a zero diagonal".into()));
    }
    let rhs: Vec<f64> = interior
        .iter()
        .map(|&n| dot(&gu[n], du) + dot(&gv[n], dv))
        .collect();
    let sys = System {
        unknowns: interior,
        rows,
        diag,
        rhs,
    };
    let scale = sys.rhs.iter().fold(1.0f64, |m, b| m.max(b.abs()));

    let boundary = boundary_potential(grid, du, dv);
    let mut phi = boundary.clone();
    let mut stats = gauss_seidel(&sys, &mut phi, opts, scale, exec);
    if !stats.converged {
        let mut retry = boundary;
        let fallback = bicgstab(&sys, &mut retry, opts, scale);
        if fallback.residual < stats.residual || !stats.residual.is_finite() {
            phi = retry;
            stats = fallback;
        }
    }

    let out_u: Vec<f64> = (0..grid.len()).map(|n| du[n] - dot(&wu[n], &phi)).collect();
    let out_v: Vec<f64> = (0..grid.len()).map(|n| dv[n] - dot(&wv[n], &phi)).collect();
    let divergence_residual = residuals(grid, &gu, &gv, &out_u, &out_v);
    Ok(FlowField {
        grid: grid.clone(),
        du: out_u,
        dv: out_v,
        divergence_residual,
        stats: Some(stats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sample a Cartesian field given as a function of (x, y) at grid nodes.
    fn sample(grid: &SimplexGrid, f: impl Fn(f64, f64) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
        grid.nodes()
            .map(|(i, j)| {
                let (x, y) = grid.point(i, j).to_cartesian();
                let (vx, vy) = f(x, y);
                let dv = vy / SQRT3_2;
                (vx - 0.5 * dv, dv)
            })
            .unzip()
    }

    const CX: f64 = 0.5;
    const CY: f64 = 0.288_675_134_594_812_9;

    #[test]
    fn gradient_is_exact_for_quadratics() {
        let grid = SimplexGrid::new(0.1).unwrap();
        let (gu, gv) = gradient_rows(&grid).unwrap();
        let f = |u: f64, v: f64| 1.0 + 2.0 * u - v + 3.0 * u * u - 2.0 * u * v + 0.5 * v * v;
        let vals: Vec<f64> = grid.nodes().map(|(i, j)| f(i as f64 * 0.1, j as f64 * 0.1)).collect();
        for (idx, (i, j)) in grid.nodes().enumerate() {
            let (u, v) = (i as f64 * 0.1, j as f64 * 0.1);
            assert!((dot(&gu[idx], &vals) - (2.0 + 6.0 * u - 2.0 * v)).abs() < 1e-10);
            assert!((dot(&gv[idx], &vals) - (-1.0 - 2.0 * u + v)).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_passes_through() {
        let grid = SimplexGrid::new(0.05).unwrap();
        let (du, dv) = sample(&grid, |x, y| (-(y - CY), x - CX));
        let out = project_divergence_free(&grid, &du, &dv, &ProjectionOptions::default(), Execution::Sequential)
            .unwrap();
        let err = out.du.iter().zip(&du).chain(out.dv.iter().zip(&dv)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        for idx in 0..grid.len() {
            assert!(out.tangent(idx).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn source_is_removed() {
        let grid = SimplexGrid::new(0.05).unwrap();
        let (du, dv) = sample(&grid, |x, y| (x - CX, y - CY));
        let out = project_divergence_free(&grid, &du, &dv, &ProjectionOptions::default(), Execution::Sequential)
            .unwrap();
        let stats = out.stats.unwrap();
        assert!(stats.converged, "{stats:?}");
        let rms = (out.du.iter().chain(&out.dv).map(|x| x * x).sum::<f64>() / (2 * grid.len()) as f64).sqrt();
        assert!(rms < 1e-6, "{rms} {stats:?}");
        assert!(out.max_interior_residual() < 1e-6);
    }

    #[test]
    fn multicolour_matches_serial() {
        let grid = SimplexGrid::new(0.05).unwrap();
        let (du, dv) = sample(&grid, |x, y| (x * x - y + 0.3, x * y));
        let serial = project_divergence_free(&grid, &du, &dv, &ProjectionOptions::default(), Execution::Sequential).unwrap();
        let opts = ProjectionOptions {
            parallel: true,
            ..Default::default()
        };
        let par = project_divergence_free(&grid, &du, &dv, &opts, Execution::Parallel).unwrap();
        let (a, b) = (serial.max_interior_residual(), par.max_interior_residual());
        assert!(a < 1e-6 && b < 1e-6, "{a} {b}");
        assert!((a - b).abs() < 1e-8);
    }
}
