//! Entropy–accuracy consistency: selection entropy over content roles, the
//! ideal calibration frontier, and strategy/metric correlations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::metrics::Observation;
use crate::pmm::StrategyMix;
use crate::rng::{derive_seed, stream};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Plug-in Shannon entropy in bits of a count vector.
pub fn selection_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Undefined("entropy of zero selections".into()));
    }
    Ok(entropy_of_weights(counts.iter().map(|&c| c as f64), total as f64))
}

fn entropy_of_weights(w: impl Iterator<Item = f64>, total: f64) -> f64 {
    let h: f64 = w
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum();
    // guard tiny negative zero from rounding
    h.max(0.0)
}

/// Entropy of the ideal respondent that picks the correct content with
/// probability `a` and each of the `k - 1` distractors with `(1 - a)/(k - 1)`.
pub fn ideal_entropy(a: f64, k: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!("accuracy {a} outside [0,1]")));
    }
    if k < 2 {
        return Err(Error::invalid("frontier needs k >= 2"));
    }
    let km1 = (k - 1) as f64;
    let correct = if a > 0.0 { -a * a.log2() } else { 0.0 };
    let rest = if a < 1.0 {
        -(1.0 - a) * ((1.0 - a) / km1).log2()
    } else {
        0.0
    };
    // exact at the uniform point, where the two terms are only equal to rounding
    if a == 1.0 / k as f64 {
        return Ok((k as f64).log2());
    }
    Ok(correct + rest)
}

/// Dense `(accuracy, H_ideal)` grid with `n + 1` evenly spaced points.
pub fn frontier_grid(k: usize, n: usize) -> Result<Vec<(f64, f64)>> {
    let n = n.max(1);
    (0..=n)
        .map(|i| {
            let a = i as f64 / n as f64;
            Ok((a, ideal_entropy(a, k)?))
        })
        .collect()
}

/// How the selection distribution behind the entropy is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyReading {
    /// Selections tallied by content role (correct, distractor 1..k-1).
    #[default]
    ContentAligned,
    /// Non-default comparison: per-position accuracies normalised into a
    /// distribution. A perfect respondent then scores log2 k, not 0.
    PerPositionAccuracy,
}

impl std::str::FromStr for EntropyReading {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" | "content_aligned" => Ok(EntropyReading::ContentAligned),
            "per_position" | "per_position_accuracy" => Ok(EntropyReading::PerPositionAccuracy),
            _ => Err(Error::invalid(format!("unknown entropy reading `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyAccuracyPoint {
    pub question_id: String,
    pub accuracy: f64,
    pub entropy_bits: f64,
    pub ideal_entropy_bits: f64,
    pub calibration_gap: f64,
    /// Counts by content role: correct first, then distractors in order.
    pub selection_counts: Vec<u64>,
}

/// One point per question from balanced-design observations.
pub fn entropy_accuracy_points(
    obs: &[Observation],
    k: usize,
    reading: EntropyReading,
) -> Result<Vec<EntropyAccuracyPoint>> {
    struct Tally {
        roles: Vec<u64>,
        placed: Vec<u64>,
        placed_correct: Vec<u64>,
    }
    let mut by_q: BTreeMap<&str, Tally> = BTreeMap::new();
    for o in obs {
        let t = by_q.entry(&o.question_id).or_insert_with(|| Tally {
            roles: vec![0; k],
            placed: vec![0; k],
            placed_correct: vec![0; k],
        });
        let slot = o.selected_role.slot();
        if slot >= k {
            return Err(Error::invalid(format!(
                "trial `{}` selected role {} beyond k={k}",
                o.trial_id, o.selected_role
            )));
        }
        t.roles[slot] += 1;
        t.placed[o.correct_position.index()] += 1;
        t.placed_correct[o.correct_position.index()] += o.is_correct() as u64;
    }

    by_q.into_iter()
        .map(|(qid, t)| {
            if t.placed.iter().any(|&n| n != t.placed[0]) {
                return Err(Error::invalid(format!(
                    "question `{qid}` is not balanced across answer positions: {:?}",
                    t.placed
                )));
            }
            let total: u64 = t.roles.iter().sum();
            let accuracy = t.roles[0] as f64 / total as f64;
            let entropy_bits = match reading {
                EntropyReading::ContentAligned => selection_entropy(&t.roles)?,
                EntropyReading::PerPositionAccuracy => {
                    let alpha: Vec<f64> = t
                        .placed_correct
                        .iter()
                        .zip(&t.placed)
                        .map(|(&c, &n)| c as f64 / n as f64)
                        .collect();
                    let s: f64 = alpha.iter().sum();
                    if s == 0.0 {
                        return Err(Error::Undefined(format!(
                            "question `{qid}` has zero accuracy at every position"
                        )));
                    }
                    entropy_of_weights(alpha.into_iter(), s)
                }
            };
            let ideal_entropy_bits = ideal_entropy(accuracy, k)?;
            Ok(EntropyAccuracyPoint {
                question_id: qid.to_string(),
                accuracy,
                entropy_bits,
                ideal_entropy_bits,
                calibration_gap: ideal_entropy_bits - entropy_bits,
                selection_counts: t.roles,
            })
        })
        .collect()
}

/// Pearson correlation; `None` when either column has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

const PERMUTATION_CHUNK: usize = 256;

/// Pearson r with a two-sided permutation p-value, `(1 + #{|r*| >= |r|}) / (1 + B)`.
///
/// Permutations run in fixed-size chunks, each on its own derived stream, so
/// the result does not depend on the execution mode.
pub fn permutation_test(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    seed: u64,
    exec: Execution,
) -> Option<(f64, f64)> {
    let r = pearson(x, y)?;
    let target = r.abs() - 1e-12;
    let chunks = permutations.div_ceil(PERMUTATION_CHUNK);
    let hits: usize = exec::map_range(exec, chunks, |c| {
        let mut rng = stream(derive_seed(seed, &format!("perm:{c}")));
        let mut shuffled = y.to_vec();
        let len = PERMUTATION_CHUNK.min(permutations - c * PERMUTATION_CHUNK);
        (0..len)
            .filter(|_| {
                shuffled.shuffle(&mut rng);
                pearson(x, &shuffled).is_some_and(|rp| rp.abs() >= target)
            })
            .count()
    })
    .into_iter()
    .sum();
    Some((r, (1 + hits) as f64 / (1 + permutations) as f64))
}

/// Per-question inputs to the correlation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyMetrics {
    pub accuracy: f64,
    pub entropy_bits: f64,
    pub mix: StrategyMix,
}

pub const METRIC_NAMES: [&str; 2] = ["accuracy", "entropy"];
pub const STRATEGY_NAMES: [&str; 3] = ["p_m", "p_r", "p_g"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub rows: [&'static str; 2],
    pub columns: [&'static str; 3],
    /// `None` where a column has zero variance.
    pub r: [[Option<f64>; 3]; 2],
    pub p_value: [[Option<f64>; 3]; 2],
    pub n: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl CorrelationReport {
    pub fn cell(&self, metric: usize, strategy: usize) -> (Option<f64>, Option<f64>) {
        (self.r[metric][strategy], self.p_value[metric][strategy])
    }
}

pub fn strategy_metric_correlations(
    rows: &[StrategyMetrics],
    permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<CorrelationReport> {
    if rows.len() < 3 {
        return Err(Error::invalid(format!(
            "correlations need at least 3 questions, got {}",
            rows.len()
        )));
    }
    let metrics: [Vec<f64>; 2] = [
        rows.iter().map(|r| r.accuracy).collect(),
        rows.iter().map(|r| r.entropy_bits).collect(),
    ];
    let strategies: [Vec<f64>; 3] = [
        rows.iter().map(|r| r.mix.p_m).collect(),
        rows.iter().map(|r| r.mix.p_r).collect(),
        rows.iter().map(|r| r.mix.p_g).collect(),
    ];
    let mut r = [[None; 3]; 2];
    let mut p_value = [[None; 3]; 2];
    for (i, m) in metrics.iter().enumerate() {
        for (j, s) in strategies.iter().enumerate() {
            let cell_seed = derive_seed(seed, &format!("{}:{}", METRIC_NAMES[i], STRATEGY_NAMES[j]));
            if let Some((ri, pi)) = permutation_test(m, s, permutations, cell_seed, exec) {
                r[i][j] = Some(ri);
                p_value[i][j] = Some(pi);
            }
        }
    }
    Ok(CorrelationReport {
        rows: METRIC_NAMES,
        columns: STRATEGY_NAMES,
        r,
        p_value,
        n: rows.len(),
        permutations,
        seed,
    })
}
