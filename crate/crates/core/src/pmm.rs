//! Strategy mixture decomposition.
//!
//! Under ideal reasoning and uniform guessing, a question answered with
//! memorization probability `p_m` (memorized slot `o_m`), reasoning `p_r` and
//! guessing `p_g` has expected accuracies
//!
//! ```text
//! A_om    = p_m       + p_r + p_g / k
//! A_other = p_m / k   + p_r + p_g / k
//! ```
//!
//! The difference `A_om - A_other = p_m (1 - 1/k)` isolates memorization;
//! `A_om` then gives `p_m + p_r`. Estimates outside the simplex are kept raw
//! alongside their Euclidean projection so misfit can be studied rather than
//! hidden.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Observation, PositionAccuracy};
use crate::model::{OptionPosition, Protocol};

/// Tolerance below which a raw component is not treated as leaving [0,1].
pub const VIOLATION_TOLERANCE: f64 = 1e-12;

/// Per-cell trial count below which theta-resolved estimates are flagged.
pub const DEFAULT_MIN_CELL_COUNT: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyMix {
    pub p_m: f64,
    pub p_r: f64,
    pub p_g: f64,
}

impl StrategyMix {
    pub fn new(p_m: f64, p_r: f64, p_g: f64) -> Self {
        StrategyMix { p_m, p_r, p_g }
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.p_m, self.p_r, self.p_g]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        StrategyMix::new(a[0], a[1], a[2])
    }

    pub fn sum(self) -> f64 {
        self.p_m + self.p_r + self.p_g
    }

    pub fn max_abs_diff(self, other: StrategyMix) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_to_simplex(v: [f64; 3]) -> [f64; 3] {
    let mut u = v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cumulative += x;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.map(|x| (x - tau).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViolationFlags {
    pub p_m_out_of_range: bool,
    pub p_r_negative: bool,
    pub p_g_negative: bool,
}

impl ViolationFlags {
    pub fn any(self) -> bool {
        self.p_m_out_of_range || self.p_r_negative || self.p_g_negative
    }
}

/// Decomposition of one (a_om, a_other) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub a_om: f64,
    pub a_other: f64,
    /// Closed-form values, possibly outside the simplex.
    pub raw: StrategyMix,
    /// Simplex point: `raw` itself, or its projection when `clamped`.
    pub mix: StrategyMix,
    pub violation: ViolationFlags,
    pub clamped: bool,
}

pub fn estimate_strategy(a_om: f64, a_other: f64, k: usize) -> Result<Decomposition> {
    if !(0.0..=1.0).contains(&a_om) || !(0.0..=1.0).contains(&a_other) {
        return Err(Error::invalid(format!(
            "accuracies ({a_om}, {a_other}) must lie in [0,1]"
        )));
    }
    if k < 2 {
        return Err(Error::invalid("strategy decomposition needs k >= 2"));
    }
    let chance = 1.0 / k as f64;
    let p_m = (a_om - a_other) / (1.0 - chance);
    let p_r = (a_om - chance) / (1.0 - chance) - p_m;
    let p_g = 1.0 - p_m - p_r;
    let raw = StrategyMix::new(p_m, p_r, p_g);

    let tol = VIOLATION_TOLERANCE;
    let violation = ViolationFlags {
        p_m_out_of_range: p_m < -tol || p_m > 1.0 + tol,
        p_r_negative: p_r < -tol,
        p_g_negative: p_g < -tol,
    };
    let clamped = violation.any();
    let mix = if clamped {
        StrategyMix::from_array(project_to_simplex(raw.as_array()))
    } else {
        raw
    };
    Ok(Decomposition {
        a_om,
        a_other,
        raw,
        mix,
        violation,
        clamped,
    })
}

/// Model-implied (A_om, A_other) for a strategy mix.
pub fn expected_accuracies(mix: StrategyMix, k: usize) -> (f64, f64) {
    let chance = 1.0 / k as f64;
    (
        mix.p_m + mix.p_r + mix.p_g * chance,
        mix.p_m * chance + mix.p_r + mix.p_g * chance,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmPolicy {
    /// The dataset's published answer position.
    #[default]
    OriginalPosition,
    /// The position with the highest accuracy, lowest index on ties.
    ArgmaxAccuracy,
}

impl std::str::FromStr for OmPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" | "original_position" => Ok(OmPolicy::OriginalPosition),
            "argmax" | "argmax_accuracy" => Ok(OmPolicy::ArgmaxAccuracy),
            _ => Err(Error::invalid(format!("unknown o_m policy `{s}`"))),
        }
    }
}

impl OmPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            OmPolicy::OriginalPosition => "original_position",
            OmPolicy::ArgmaxAccuracy => "argmax_accuracy",
        }
    }
}

pub fn select_memorized_position(
    acc: &PositionAccuracy,
    policy: OmPolicy,
    original: OptionPosition,
) -> Result<OptionPosition> {
    match policy {
        OmPolicy::OriginalPosition => Ok(original),
        OmPolicy::ArgmaxAccuracy => {
            let alpha = acc.defined()?;
            let mut best = 0;
            for (i, &a) in alpha.iter().enumerate() {
                if a > alpha[best] {
                    best = i;
                }
            }
            Ok(OptionPosition::at(best))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimate {
    pub question_id: String,
    pub o_m: OptionPosition,
    pub policy: OmPolicy,
    pub decomposition: Decomposition,
}

impl StrategyEstimate {
    pub fn mix(&self) -> StrategyMix {
        self.decomposition.mix
    }
}

/// Decompose a question from its balanced-design position accuracies.
/// `a_other` pools all trials whose answer was not at `o_m`.
pub fn estimate_question(
    acc: &PositionAccuracy,
    policy: OmPolicy,
    original: OptionPosition,
) -> Result<StrategyEstimate> {
    acc.defined()?;
    let k = acc.k();
    let o_m = select_memorized_position(acc, policy, original)?;
    let a_om = acc.alpha[o_m.index()].expect("checked defined");
    let a_other = acc
        .pooled(OptionPosition::all(k).filter(|&p| p != o_m))
        .expect("checked defined");
    Ok(StrategyEstimate {
        question_id: acc.question_id.clone(),
        o_m,
        policy,
        decomposition: estimate_strategy(a_om, a_other, k)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub question_id: String,
    pub alpha_observed: f64,
    pub alpha_expected: f64,
    pub delta_alpha: f64,
}

/// Compare the position-averaged observed accuracy with the one implied by
/// the estimate's simplex point. Raw estimates reproduce the observation
/// exactly, so any gap comes from projecting a violating estimate.
pub fn validate_question(
    estimate: &StrategyEstimate,
    acc: &PositionAccuracy,
) -> Result<ValidationRecord> {
    acc.defined()?;
    let k = acc.k();
    let o_m = estimate.o_m;
    let a_om = acc.alpha[o_m.index()].expect("checked defined");
    let a_other = acc
        .pooled(OptionPosition::all(k).filter(|&p| p != o_m))
        .expect("checked defined");
    let kf = k as f64;
    let alpha_observed = (a_om + (kf - 1.0) * a_other) / kf;
    let (e_om, e_other) = expected_accuracies(estimate.mix(), k);
    let alpha_expected = (e_om + (kf - 1.0) * e_other) / kf;
    Ok(ValidationRecord {
        question_id: estimate.question_id.clone(),
        alpha_observed,
        alpha_expected,
        delta_alpha: (alpha_observed - alpha_expected).abs(),
    })
}

/// Estimate for one (question, theta) under one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub question_id: String,
    pub theta: f64,
    pub anchor: OptionPosition,
    pub o_m: OptionPosition,
    pub decomposition: Decomposition,
    pub n_om: u64,
    pub n_other: u64,
    /// Either side borrowed trials from other anchors at the same theta.
    pub pooled: bool,
    /// Either side has fewer than the minimum cell count.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub theta: f64,
    pub n_questions: usize,
    pub mu_m: f64,
    pub mu_r: f64,
    pub mu_g: f64,
    pub sd_m: f64,
    pub sd_r: f64,
    pub sd_g: f64,
    pub violation_rate: f64,
    pub low_confidence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStrategyCurve {
    pub protocol: Protocol,
    pub anchor: OptionPosition,
    pub points: Vec<EnsemblePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaResolved {
    pub curve: EnsembleStrategyCurve,
    pub estimates: Vec<ThetaEstimate>,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    correct: u64,
    n: u64,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.correct += hit as u64;
        self.n += 1;
    }
    fn merge(self, o: Tally) -> Tally {
        Tally {
            correct: self.correct + o.correct,
            n: self.n + o.n,
        }
    }
    fn rate(self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }
}

/// Theta-resolved decomposition for one (protocol, anchor).
///
/// For each question and theta, `a_om` is the accuracy over the anchor's
/// trials whose realized answer position was `o_m`, and `a_other` over those
/// where it was not. A side with fewer than `min_count` trials in the anchor's
/// cell is filled from all anchors of the same (question, protocol, theta);
/// at theta = 0 one side is always empty, so this is what makes the low-theta
/// end estimable. Ensemble means average projected estimates.
pub fn theta_resolved_estimates(
    obs: &[Observation],
    protocol: Protocol,
    anchor: OptionPosition,
    theta_grid: &[f64],
    memorized: &BTreeMap<String, OptionPosition>,
    k: usize,
    min_count: u64,
) -> Result<ThetaResolved> {
    // (question, theta) -> [anchor-cell (om, other), all-anchor (om, other)]
    let mut tallies: BTreeMap<(&str, u64), [Tally; 4]> = BTreeMap::new();
    for o in obs.iter().filter(|o| o.protocol == protocol) {
        let Some(&o_m) = memorized.get(&o.question_id) else {
            continue;
        };
        let t = tallies
            .entry((o.question_id.as_str(), o.theta.to_bits()))
            .or_default();
        let side = if o.correct_position == o_m { 0 } else { 1 };
        t[2 + side].add(o.is_correct());
        if o.anchor == anchor {
            t[side].add(o.is_correct());
        }
    }

    let mut estimates = Vec::new();
    let mut points = Vec::new();
    for &theta in theta_grid {
        let mut mixes = Vec::new();
        let mut violations = 0;
        let mut low = 0;
        for (qid, &o_m) in memorized {
            let Some(t) = tallies.get(&(qid.as_str(), theta.to_bits())) else {
                continue;
            };
            let fill = |own: Tally, all: Tally| {
                if own.n < min_count {
                    (all, all.n > own.n)
                } else {
                    (own, false)
                }
            };
            let (om, pooled_om) = fill(t[0], t[2]);
            let (other, pooled_other) = fill(t[1], t[3]);
            let (Some(a_om), Some(a_other)) = (om.rate(), other.rate()) else {
                continue;
            };
            // anchors that never saw this question at this theta contribute nothing
            if t[0].merge(t[1]).n == 0 {
                continue;
            }
            let d = estimate_strategy(a_om, a_other, k)?;
            let low_confidence = om.n < min_count || other.n < min_count;
            violations += d.clamped as usize;
            low += low_confidence as usize;
            mixes.push(d.mix);
            estimates.push(ThetaEstimate {
                question_id: qid.clone(),
                theta,
                anchor,
                o_m,
                decomposition: d,
                n_om: om.n,
                n_other: other.n,
                pooled: pooled_om || pooled_other,
                low_confidence,
            });
        }
        if mixes.is_empty() {
            continue;
        }
        let n = mixes.len() as f64;
        let mean = |f: fn(&StrategyMix) -> f64| mixes.iter().map(f).sum::<f64>() / n;
        let (mu_m, mu_r, mu_g) = (mean(|m| m.p_m), mean(|m| m.p_r), mean(|m| m.p_g));
        let sd = |f: fn(&StrategyMix) -> f64, mu: f64| {
            (mixes.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        points.push(EnsemblePoint {
            theta,
            n_questions: mixes.len(),
            mu_m,
            mu_r,
            mu_g,
            sd_m: sd(|m| m.p_m, mu_m),
            sd_r: sd(|m| m.p_r, mu_r),
            sd_g: sd(|m| m.p_g, mu_g),
            violation_rate: violations as f64 / n,
            low_confidence: low,
        });
    }
    Ok(ThetaResolved {
        curve: EnsembleStrategyCurve {
            protocol,
            anchor,
            points,
        },
        estimates,
    })
}
