//! Positional accuracy statistics: per-position accuracy, the (mu, sigma^2)
//! difficulty map, wrong-answer distributions, theta sweep curves and the
//! inclusive/exclusive difference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, ContentRole, OptionPosition, Protocol, TrialOutcome, TrialSpec};

/// A scored trial flattened for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub trial_id: String,
    pub question_id: String,
    pub theta: f64,
    pub protocol: Protocol,
    pub anchor: OptionPosition,
    pub replicate: u32,
    pub branch: Branch,
    pub correct_position: OptionPosition,
    pub selected_position: OptionPosition,
    pub selected_role: ContentRole,
}

impl Observation {
    pub fn new(spec: &TrialSpec, outcome: &TrialOutcome) -> Self {
        debug_assert_eq!(spec.trial_id, outcome.trial_id);
        Observation {
            trial_id: spec.trial_id.clone(),
            question_id: spec.question_id.clone(),
            theta: spec.theta,
            protocol: spec.protocol,
            anchor: spec.anchor_position,
            replicate: spec.replicate,
            branch: spec.branch,
            correct_position: spec.arrangement.correct_position,
            selected_position: outcome.selected_position,
            selected_role: outcome.selected_role,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.selected_role.is_correct()
    }

    /// Sort key giving a canonical order independent of log order.
    fn canonical_key(&self) -> (&str, Protocol, u64, OptionPosition, u32, &str) {
        (
            &self.question_id,
            self.protocol,
            self.theta.to_bits(),
            self.anchor,
            self.replicate,
            &self.trial_id,
        )
    }
}

/// Sort observations into canonical order so float sums are reproducible.
pub fn canonical_sort(obs: &mut [Observation]) {
    obs.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
}

/// Per-position accuracy for one question at one theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionAccuracy {
    pub question_id: String,
    pub protocol: Protocol,
    pub theta: f64,
    /// `None` where no trial placed the answer at that position.
    pub alpha: Vec<Option<f64>>,
    pub correct: Vec<u64>,
    pub counts: Vec<u64>,
}

impl PositionAccuracy {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    /// Accuracy at every position, or an error naming the first gap.
    pub fn defined(&self) -> Result<Vec<f64>> {
        self.alpha
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.ok_or_else(|| {
                    Error::Undefined(format!(
                        "question `{}` has no trials with the answer at {}",
                        self.question_id,
                        OptionPosition::at(i)
                    ))
                })
            })
            .collect()
    }

    /// Pooled accuracy over the given positions.
    pub fn pooled(&self, positions: impl Iterator<Item = OptionPosition>) -> Option<f64> {
        let (mut c, mut n) = (0, 0);
        for p in positions {
            c += self.correct[p.index()];
            n += self.counts[p.index()];
        }
        (n > 0).then(|| c as f64 / n as f64)
    }
}

/// Accuracy conditioned on where the answer was placed. All observations must
/// share question, protocol and theta.
pub fn position_accuracy(obs: &[&Observation], k: usize) -> Result<PositionAccuracy> {
    let first = obs
        .first()
        .ok_or_else(|| Error::Undefined("position accuracy of zero trials".into()))?;
    let mut correct = vec![0u64; k];
    let mut counts = vec![0u64; k];
    for o in obs {
        if o.question_id != first.question_id
            || o.theta != first.theta
            || o.protocol != first.protocol
        {
            return Err(Error::invalid(
                "position_accuracy needs trials from a single (question, protocol, theta)",
            ));
        }
        let p = o.correct_position.index();
        counts[p] += 1;
        correct[p] += o.is_correct() as u64;
    }
    let alpha = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok(PositionAccuracy {
        question_id: first.question_id.clone(),
        protocol: first.protocol,
        theta: first.theta,
        alpha,
        correct,
        counts,
    })
}

/// Group canonically sorted observations by (question, protocol, theta).
pub fn position_accuracies(obs: &[Observation], k: usize) -> Result<Vec<PositionAccuracy>> {
    let mut groups: BTreeMap<(&str, Protocol, u64), Vec<&Observation>> = BTreeMap::new();
    for o in obs {
        groups
            .entry((&o.question_id, o.protocol, o.theta.to_bits()))
            .or_default()
            .push(o);
    }
    groups
        .values()
        .map(|g| position_accuracy(g, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// mu >= 0.5, sigma^2 < 0.125
    ConsistentReasoning,
    /// mu >= 0.5, sigma^2 >= 0.125
    PositionDependentSuccess,
    /// mu < 0.5, sigma^2 < 0.125
    ConsistentlyChallenging,
    /// mu < 0.5, sigma^2 >= 0.125
    PositionDominatedConfusion,
}

pub const MU_THRESHOLD: f64 = 0.5;
pub const SIGMA2_THRESHOLD: f64 = 0.125;

impl Region {
    /// Boundary values belong to the upper region on each axis.
    pub fn classify(mu: f64, sigma2: f64) -> Self {
        match (mu >= MU_THRESHOLD, sigma2 >= SIGMA2_THRESHOLD) {
            (true, false) => Region::ConsistentReasoning,
            (true, true) => Region::PositionDependentSuccess,
            (false, false) => Region::ConsistentlyChallenging,
            (false, true) => Region::PositionDominatedConfusion,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::ConsistentReasoning => "consistent_reasoning",
            Region::PositionDependentSuccess => "position_dependent_success",
            Region::ConsistentlyChallenging => "consistently_challenging",
            Region::PositionDominatedConfusion => "position_dominated_confusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPoint {
    pub question_id: String,
    pub mu: f64,
    pub sigma2: f64,
    pub region: Region,
}

/// Mean and population variance (divisor k) of the per-position accuracies.
pub fn difficulty_map(acc: &PositionAccuracy) -> Result<DifficultyPoint> {
    let alpha = acc.defined()?;
    let k = alpha.len() as f64;
    let mu = alpha.iter().sum::<f64>() / k;
    let sigma2 = alpha.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / k;
    Ok(DifficultyPoint {
        question_id: acc.question_id.clone(),
        mu,
        sigma2,
        region: Region::classify(mu, sigma2),
    })
}

/// One row of the wrong-answer matrix: where selections went when the answer
/// sat at `correct_position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongAnswerRow {
    pub correct_position: OptionPosition,
    pub total: u64,
    /// Accuracy for this placement.
    pub alpha: f64,
    /// Selection frequency by position; the entry at `correct_position`
    /// equals `alpha`, the others are pi(o_w | o_c).
    pub selection: Vec<f64>,
}

impl WrongAnswerRow {
    pub fn wrong(&self, selected: OptionPosition) -> Option<f64> {
        (selected != self.correct_position).then(|| self.selection[selected.index()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongAnswerMatrix {
    /// Row per correct position, `None` where no trial used that placement.
    pub rows: Vec<Option<WrongAnswerRow>>,
}

pub fn wrong_answer_distribution(obs: &[Observation], k: usize) -> WrongAnswerMatrix {
    let mut counts = vec![vec![0u64; k]; k];
    for o in obs {
        counts[o.correct_position.index()][o.selected_position.index()] += 1;
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| {
                let selection: Vec<f64> = row.iter().map(|&n| n as f64 / total as f64).collect();
                WrongAnswerRow {
                    correct_position: OptionPosition::at(c),
                    total,
                    alpha: selection[c],
                    selection,
                }
            })
        })
        .collect();
    WrongAnswerMatrix { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub n: u64,
    /// Pooled accuracy over all trials in the cell; `None` marks a gap.
    pub mean: Option<f64>,
    /// Pooled per-trial variance p(1-p).
    pub var: Option<f64>,
    pub se: Option<f64>,
    /// Population variance of per-question accuracies around their mean.
    pub question_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub protocol: Protocol,
    pub anchor: OptionPosition,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn gaps(&self) -> Vec<f64> {
        self.points
            .iter()
            .filter(|p| p.mean.is_none())
            .map(|p| p.theta)
            .collect()
    }

    pub fn at(&self, theta: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.theta == theta)
    }
}

/// Accuracy curves per (protocol, anchor) over `theta_grid`. Static trials
/// are ignored. Thetas without trials appear as gaps.
pub fn sweep_curves(obs: &[Observation], theta_grid: &[f64]) -> Vec<SweepCurve> {
    // (protocol, anchor) -> theta -> question -> (correct, n)
    type Cell<'a> = BTreeMap<&'a str, (u64, u64)>;
    let mut cells: BTreeMap<(Protocol, OptionPosition), BTreeMap<u64, Cell<'_>>> = BTreeMap::new();
    for o in obs.iter().filter(|o| o.protocol != Protocol::Static) {
        let e = cells
            .entry((o.protocol, o.anchor))
            .or_default()
            .entry(o.theta.to_bits())
            .or_default()
            .entry(o.question_id.as_str())
            .or_default();
        e.0 += o.is_correct() as u64;
        e.1 += 1;
    }
    cells
        .into_iter()
        .map(|((protocol, anchor), by_theta)| {
            let points = theta_grid
                .iter()
                .map(|&theta| match by_theta.get(&theta.to_bits()) {
                    None => SweepPoint {
                        theta,
                        n: 0,
                        mean: None,
                        var: None,
                        se: None,
                        question_var: None,
                    },
                    Some(per_q) => sweep_point(theta, per_q),
                })
                .collect();
            SweepCurve {
                protocol,
                anchor,
                points,
            }
        })
        .collect()
}

fn sweep_point(theta: f64, per_q: &BTreeMap<&str, (u64, u64)>) -> SweepPoint {
    let (c, n) = per_q
        .values()
        .fold((0u64, 0u64), |(c, n), (qc, qn)| (c + qc, n + qn));
    let p = c as f64 / n as f64;
    let var = p * (1.0 - p);
    let q_acc: Vec<f64> = per_q.values().map(|&(qc, qn)| qc as f64 / qn as f64).collect();
    let q_mean = q_acc.iter().sum::<f64>() / q_acc.len() as f64;
    let question_var = q_acc.iter().map(|a| (a - q_mean).powi(2)).sum::<f64>() / q_acc.len() as f64;
    SweepPoint {
        theta,
        n,
        mean: Some(p),
        var: Some(var),
        se: Some((var / n as f64).sqrt()),
        question_var: Some(question_var),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub theta: f64,
    /// `None` where either curve has a gap.
    pub delta: Option<f64>,
}

/// Pointwise inclusive minus exclusive accuracy.
pub fn delta_mu(inclusive: &SweepCurve, exclusive: &SweepCurve) -> Result<Vec<DeltaPoint>> {
    if inclusive.anchor != exclusive.anchor {
        return Err(Error::invalid(format!(
            "delta_mu needs curves for one anchor, got {} and {}",
            inclusive.anchor, exclusive.anchor
        )));
    }
    let thetas = |c: &SweepCurve| c.points.iter().map(|p| p.theta).collect::<Vec<_>>();
    let (ti, te) = (thetas(inclusive), thetas(exclusive));
    let mut missing: Vec<f64> = ti
        .iter()
        .filter(|t| !te.contains(t))
        .chain(te.iter().filter(|t| !ti.contains(t)))
        .copied()
        .collect();
    if !missing.is_empty() {
        missing.sort_by(f64::total_cmp);
        return Err(Error::GridMismatch { missing });
    }
    Ok(inclusive
        .points
        .iter()
        .zip(&exclusive.points)
        .map(|(i, e)| DeltaPoint {
            theta: i.theta,
            delta: i.mean.zip(e.mean).map(|(a, b)| a - b),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(q: &str, correct: usize, selected: usize, protocol: Protocol, theta: f64, anchor: usize) -> Observation {
        let role = if correct == selected {
            ContentRole::Correct
        } else {
            ContentRole::Distractor(1)
        };
        Observation {
            trial_id: format!("{q}-{correct}-{selected}-{theta}"),
            question_id: q.into(),
            theta,
            protocol,
            anchor: OptionPosition::at(anchor),
            replicate: 0,
            branch: Branch::Fixed,
            correct_position: OptionPosition::at(correct),
            selected_position: OptionPosition::at(selected),
            selected_role: role,
        }
    }

    fn accuracy(alpha: [f64; 4]) -> PositionAccuracy {
        PositionAccuracy {
            question_id: "q".into(),
            protocol: Protocol::Static,
            theta: 0.0,
            alpha: alpha.iter().map(|&a| Some(a)).collect(),
            correct: vec![0; 4],
            counts: vec![1; 4],
        }
    }

    #[test]
    fn eighty_of_a_hundred() {
        let mut v = Vec::new();
        for i in 0..100 {
            v.push(obs("q", 0, if i < 80 { 0 } else { 1 }, Protocol::Static, 0.0, 0));
        }
        let refs: Vec<&Observation> = v.iter().collect();
        let pa = position_accuracy(&refs, 4).unwrap();
        assert_eq!(pa.alpha[0], Some(0.8));
        assert_eq!(pa.alpha[1], None);
        assert!(difficulty_map(&pa).unwrap_err().to_string().contains(" B"));
    }

    #[test]
    fn difficulty_examples() {
        let d = difficulty_map(&accuracy([1.0; 4])).unwrap();
        assert_eq!((d.mu, d.sigma2, d.region), (1.0, 0.0, Region::ConsistentReasoning));
        let d = difficulty_map(&accuracy([0.0; 4])).unwrap();
        assert_eq!((d.mu, d.sigma2, d.region), (0.0, 0.0, Region::ConsistentlyChallenging));

        // independent route: E[x^2] - E[x]^2 in exact rationals (units of 1/400)
        let xs = [320i64, 180, 180, 180];
        let sum: i64 = xs.iter().sum();
        let sumsq: i64 = xs.iter().map(|x| x * x).sum();
        let mu = sum as f64 / 4.0 / 400.0;
        let var = (4 * sumsq - sum * sum) as f64 / 16.0 / 160_000.0;
        let d = difficulty_map(&accuracy([0.8, 0.45, 0.45, 0.45])).unwrap();
        assert!((d.mu - mu).abs() < 1e-15 && (mu - 0.5375).abs() < 1e-15);
        assert!((d.sigma2 - var).abs() < 1e-15 && (var - 0.02296875).abs() < 1e-15);
        assert_eq!(d.region, Region::ConsistentReasoning);
    }

    #[test]
    fn region_boundaries_go_up() {
        assert_eq!(Region::classify(0.5, 0.0), Region::ConsistentReasoning);
        assert_eq!(Region::classify(0.5, 0.125), Region::PositionDependentSuccess);
        assert_eq!(Region::classify(0.49, 0.125), Region::PositionDominatedConfusion);
    }

    #[test]
    fn wrong_rows_are_stochastic() {
        let v = vec![
            obs("q", 0, 0, Protocol::Static, 0.0, 0),
            obs("q", 0, 1, Protocol::Static, 0.0, 0),
            obs("q", 0, 3, Protocol::Static, 0.0, 0),
            obs("q", 2, 2, Protocol::Static, 0.0, 2),
        ];
        let m = wrong_answer_distribution(&v, 4);
        let r0 = m.rows[0].as_ref().unwrap();
        assert!((r0.alpha - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r0.wrong(OptionPosition::at(0)), None);
        assert!((r0.selection.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.rows[1].is_none());
        assert_eq!(m.rows[2].as_ref().unwrap().alpha, 1.0);
    }

    #[test]
    fn sweep_gaps_and_delta() {
        let mut v = Vec::new();
        for (p, sel) in [(Protocol::Inclusive, 0), (Protocol::Exclusive, 1)] {
            v.push(obs("q", 0, 0, p, 0.0, 0));
            v.push(obs("q", 0, sel, p, 0.5, 0));
        }
        let curves = sweep_curves(&v, &[0.0, 0.5, 1.0]);
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].gaps(), vec![1.0]);
        let d = delta_mu(&curves[0], &curves[1]).unwrap();
        assert_eq!(d[0].delta, Some(0.0));
        assert_eq!(d[1].delta, Some(1.0));
        assert_eq!(d[2].delta, None);

        let short = SweepCurve {
            points: curves[1].points[..2].to_vec(),
            ..curves[1].clone()
        };
        match delta_mu(&curves[0], &short) {
            Err(Error::GridMismatch { missing }) => assert_eq!(missing, vec![1.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_point_statistics() {
        let mut v = Vec::new();
        // q1: 3/4 correct, q2: 1/4 correct
        for i in 0..4 {
            v.push(obs("q1", 0, if i < 3 { 0 } else { 1 }, Protocol::Inclusive, 1.0, 0));
            v.push(obs("q2", 0, if i < 1 { 0 } else { 1 }, Protocol::Inclusive, 1.0, 0));
        }
        let c = &sweep_curves(&v, &[1.0])[0];
        let p = &c.points[0];
        assert_eq!(p.n, 8);
        assert_eq!(p.mean, Some(0.5));
        assert_eq!(p.var, Some(0.25));
        assert!((p.se.unwrap() - (0.25f64 / 8.0).sqrt()).abs() < 1e-15);
        assert_eq!(p.question_var, Some(0.0625));
    }
}
