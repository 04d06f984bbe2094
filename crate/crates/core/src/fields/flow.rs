use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::projection::{project_divergence_free, FlowField, ProjectionOptions};
use super::{idw_weights, SimplexGrid, SimplexPoint};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::OptionPosition;
use crate::pmm::ThetaEstimate;

/// Strategy path of one question under one anchor, ordered by theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub anchor: OptionPosition,
    pub points: Vec<(f64, SimplexPoint)>,
}

pub fn trajectories(estimates: &[ThetaEstimate]) -> Result<Vec<Trajectory>> {
    let mut groups: BTreeMap<(&str, OptionPosition), Vec<(f64, SimplexPoint)>> = BTreeMap::new();
    for e in estimates {
        groups
            .entry((&e.question_id, e.anchor))
            .or_default()
            .push((e.theta, e.decomposition.mix.into()));
    }
    groups
        .into_iter()
        .map(|((qid, anchor), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            points.dedup_by(|a, b| a.0 == b.0);
            if points.len() < 2 {
                return Err(Error::invalid(format!(
                    "question `{qid}` (anchor {anchor}) has estimates at a single theta"
                )));
            }
            Ok(Trajectory {
                question_id: qid.to_string(),
                anchor,
                points,
            })
        })
        .collect()
}

/// A tangent vector `dP/dtheta` observed at a point of the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub question_id: String,
    pub anchor: OptionPosition,
    pub theta: f64,
    pub point: SimplexPoint,
    /// `(dp_m, dp_r, dp_g)`.
    pub tangent: [f64; 3],
}

/// Differentiate each trajectory in theta: central differences inside,
/// three-point one-sided differences at the ends (two-point for a
/// two-point trajectory).
pub fn finite_difference_flow(trajs: &[Trajectory]) -> Result<Vec<FlowSample>> {
    let mut out = Vec::new();
    for t in trajs {
        let n = t.points.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "trajectory for `{}` needs at least two thetas",
                t.question_id
            )));
        }
        let step = t.points[1].0 - t.points[0].0;
        for w in t.points.windows(2) {
            if ((w[1].0 - w[0].0) - step).abs() > 1e-9 * step.abs().max(1.0) || step <= 0.0 {
                return Err(Error::invalid(format!(
                    "trajectory for `{}` is on a non-uniform theta grid",
                    t.question_id
                )));
            }
        }
        let p = |i: usize| t.points[i].1.as_array();
        for i in 0..n {
            let d = |c: usize| {
                if n == 2 {
                    (p(1)[c] - p(0)[c]) / step
                } else if i == 0 {
                    (-3.0 * p(0)[c] + 4.0 * p(1)[c] - p(2)[c]) / (2.0 * step)
                } else if i == n - 1 {
                    (3.0 * p(n - 1)[c] - 4.0 * p(n - 2)[c] + p(n - 3)[c]) / (2.0 * step)
                } else {
                    (p(i + 1)[c] - p(i - 1)[c]) / (2.0 * step)
                }
            };
            out.push(FlowSample {
                question_id: t.question_id.clone(),
                anchor: t.anchor,
                theta: t.points[i].0,
                point: t.points[i].1,
                tangent: [d(0), d(1), d(2)],
            });
        }
    }
    Ok(out)
}

/// Average points and tangents over questions at each (anchor, theta).
pub fn ensemble_average_flow(samples: &[FlowSample]) -> Vec<FlowSample> {
    let mut groups: BTreeMap<(OptionPosition, u64), Vec<&FlowSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.anchor, s.theta.to_bits())).or_default().push(s);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&FlowSample) -> [f64; 3]| {
                let mut acc = [0.0; 3];
                for s in &g {
                    for (a, x) in acc.iter_mut().zip(f(s)) {
                        *a += x / n;
                    }
                }
                acc
            };
            let p = mean(&|s| s.point.as_array());
            FlowSample {
                question_id: "ensemble".into(),
                anchor: g[0].anchor,
                theta: g[0].theta,
                point: SimplexPoint {
                    p_m: p[0],
                    p_r: p[1],
                    p_g: p[2],
                },
                tangent: mean(&|s| s.tangent),
            }
        })
        .collect()
}

/// Interpolate scattered tangent vectors onto the grid by inverse-distance
/// weighting, then remove the divergent part.
pub fn interpolate_flow(
    samples: &[FlowSample],
    h: f64,
    opts: &ProjectionOptions,
    exec: Execution,
) -> Result<FlowField> {
    for s in samples {
        if s.tangent.iter().sum::<f64>().abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "flow vector for `{}` at theta {} is not tangent to the simplex",
                s.question_id, s.theta
            )));
        }
    }
    let sites: Vec<(f64, f64)> = samples.iter().map(|s| s.point.to_cartesian()).collect();
    check_spread(&sites)?;
    let grid = SimplexGrid::new(h)?;
    let nodes: Vec<(usize, usize)> = grid.nodes().collect();
    let (du, dv): (Vec<f64>, Vec<f64>) = exec::map(exec, &nodes, |&(i, j)| {
        let (x, y) = grid.point(i, j).to_cartesian();
        let w = idw_weights(&sites, x, y);
        w.iter().zip(samples).fold((0.0, 0.0), |(a, b), (w, s)| {
            (a + w * s.tangent[2], b + w * s.tangent[1])
        })
    })
    .into_iter()
    .unzip();
    project_divergence_free(&grid, &du, &dv, opts, exec)
}

/// At least three distinct, non-collinear sites.
fn check_spread(sites: &[(f64, f64)]) -> Result<()> {
    let degenerate = || Error::Degenerate("flow samples need three non-collinear sites".into());
    let a = *sites.first().ok_or_else(degenerate)?;
    let far = sites
        .iter()
        .copied()
        .max_by(|p, q| dist2(*p, a).total_cmp(&dist2(*q, a)))
        .unwrap();
    if dist2(far, a) < 1e-18 {
        return Err(degenerate());
    }
    let (ex, ey) = (far.0 - a.0, far.1 - a.1);
    let len = (ex * ex + ey * ey).sqrt();
    let off_line = sites
        .iter()
        .any(|&(x, y)| ((x - a.0) * ey - (y - a.1) * ex).abs() / len > 1e-9);
    if off_line {
        Ok(())
    } else {
        Err(degenerate())
    }
}

fn dist2(p: (f64, f64), q: (f64, f64)) -> f64 {
    (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)
}
