//! Trial plans: theta sweeps under inclusive/exclusive randomization and the
//! balanced all-positions design.
//!
//! Each trial flips its own Bernoulli(theta) coin. On the fixed branch the
//! correct answer stays at the anchor; on the randomized branch it is drawn
//! uniformly over all positions (inclusive) or over all positions except the
//! anchor (exclusive). The branch taken is recorded on the trial so the
//! exclusion property can be audited exactly.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{arrange, Branch, Dataset, OptionPosition, Protocol, Question, TrialSpec};
use crate::rng::{content_hash, derive_seed, substream};

/// Theta grid used when none is given: 0.0, 0.1, ..., 1.0.
pub fn default_theta_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub const DEFAULT_TRIALS_PER_CELL: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub theta_grid: Vec<f64>,
    pub protocols: Vec<Protocol>,
    /// Empty means every position.
    #[serde(default)]
    pub anchor_positions: Vec<OptionPosition>,
    pub trials_per_cell: u32,
    pub master_seed: u64,
}

impl SweepConfig {
    pub fn new(master_seed: u64) -> Self {
        SweepConfig {
            theta_grid: default_theta_grid(),
            protocols: vec![Protocol::Inclusive, Protocol::Exclusive],
            anchor_positions: Vec::new(),
            trials_per_cell: DEFAULT_TRIALS_PER_CELL,
            master_seed,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.theta_grid.is_empty() {
            return Err(Error::invalid("theta grid is empty"));
        }
        if self.theta_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("theta grid values must lie in [0,1]"));
        }
        if self.theta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("theta grid must be strictly increasing"));
        }
        if self.trials_per_cell == 0 {
            return Err(Error::invalid("trials_per_cell must be at least 1"));
        }
        if self.protocols.is_empty() {
            return Err(Error::invalid("no protocols selected"));
        }
        if self.protocols.contains(&Protocol::Static) {
            return Err(Error::invalid(
                "sweeps use inclusive/exclusive protocols; static belongs to the balanced design",
            ));
        }
        for a in &self.anchor_positions {
            a.check(k)?;
        }
        Ok(())
    }

    fn anchors(&self, k: usize) -> Vec<OptionPosition> {
        if self.anchor_positions.is_empty() {
            OptionPosition::all(k).collect()
        } else {
            self.anchor_positions.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedDesignConfig {
    pub trials_per_position: u32,
    pub master_seed: u64,
}

impl BalancedDesignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials_per_position == 0 {
            return Err(Error::invalid("trials_per_position must be at least 1"));
        }
        Ok(())
    }
}

/// Draw where the correct answer goes for one trial, and which branch the
/// theta coin chose.
pub fn draw_correct_position<R: Rng + ?Sized>(
    theta: f64,
    anchor: OptionPosition,
    protocol: Protocol,
    k: usize,
    rng: &mut R,
) -> Result<(OptionPosition, Branch)> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta {theta} outside [0,1]")));
    }
    anchor.check(k)?;
    if protocol == Protocol::Exclusive && k < 2 {
        return Err(Error::invalid(
            "exclusive randomization needs at least two positions",
        ));
    }
    if protocol == Protocol::Static {
        return Ok((anchor, Branch::Fixed));
    }
    // random::<f64>() is in [0,1): theta=0 never randomizes, theta=1 always does.
    if rng.random::<f64>() >= theta {
        return Ok((anchor, Branch::Fixed));
    }
    let drawn = match protocol {
        Protocol::Inclusive => rng.random_range(0..k),
        Protocol::Exclusive => {
            let i = rng.random_range(0..k - 1);
            if i >= anchor.index() {
                i + 1
            } else {
                i
            }
        }
        Protocol::Static => unreachable!(),
    };
    Ok((OptionPosition::at(drawn), Branch::Randomized))
}

fn check_unique_ids(dataset: &Dataset) -> Result<()> {
    let mut seen = HashSet::new();
    for q in dataset.questions() {
        if !seen.insert(q.id.as_str()) {
            return Err(Error::DuplicateQuestion(q.id.clone()));
        }
    }
    Ok(())
}

/// Key of a trial's random streams: cell coordinates without the protocol,
/// so inclusive and exclusive trials of the same cell share their coin flip,
/// arrangement draw and respondent stream. At theta = 0 the two protocols
/// therefore produce identical trials.
fn seed_key(
    design: &str,
    question_id: &str,
    theta: f64,
    anchor: OptionPosition,
    replicate: u32,
    k: usize,
) -> String {
    format!(
        "{design}\u{1f}{question_id}\u{1f}{:016x}\u{1f}{anchor}\u{1f}{replicate}\u{1f}{k}",
        theta.to_bits()
    )
}

/// Stable content-addressed id: hash of the seed key, protocol and master seed.
fn trial_id(seed_key: &str, protocol: Protocol, master_seed: u64) -> String {
    let key = format!("{seed_key}\u{1f}{protocol}\u{1f}{master_seed}");
    content_hash(key.as_bytes())[..32].to_string()
}

#[allow(clippy::too_many_arguments)]
fn make_trial(
    design: &str,
    question: &Question,
    protocol: Protocol,
    theta: f64,
    anchor: OptionPosition,
    replicate: u32,
    k: usize,
    master_seed: u64,
) -> Result<TrialSpec> {
    let key = seed_key(design, &question.id, theta, anchor, replicate, k);
    let id = trial_id(&key, protocol, master_seed);
    let seed = derive_seed(master_seed, &key);
    let mut rng = substream(seed, "plan");
    let (correct, branch) = draw_correct_position(theta, anchor, protocol, k, &mut rng)?;
    let arrangement = arrange(question, correct, &mut rng);
    Ok(TrialSpec {
        trial_id: id,
        question_id: question.id.clone(),
        theta,
        protocol,
        anchor_position: anchor,
        replicate,
        branch,
        arrangement,
        rng_seed: seed,
    })
}

/// Every (question, protocol, theta, anchor) cell with `trials_per_cell`
/// replicates, in canonical order.
pub fn build_sweep_plan(
    dataset: &Dataset,
    config: &SweepConfig,
    execution: Execution,
) -> Result<Vec<TrialSpec>> {
    check_unique_ids(dataset)?;
    let k = dataset.k();
    config.validate(k)?;
    let anchors = config.anchors(k);
    let per_question = exec::map(execution, dataset.questions(), |q| {
        let mut out = Vec::with_capacity(
            config.protocols.len()
                * config.theta_grid.len()
                * anchors.len()
                * config.trials_per_cell as usize,
        );
        for &protocol in &config.protocols {
            for &theta in &config.theta_grid {
                for &anchor in &anchors {
                    for rep in 0..config.trials_per_cell {
                        out.push(make_trial(
                            "sweep",
                            q,
                            protocol,
                            theta,
                            anchor,
                            rep,
                            k,
                            config.master_seed,
                        )?);
                    }
                }
            }
        }
        Ok::<_, Error>(out)
    });
    flatten(per_question)
}

/// Correct answer at every position, `trials_per_position` times each.
pub fn build_balanced_plan(
    dataset: &Dataset,
    config: &BalancedDesignConfig,
    execution: Execution,
) -> Result<Vec<TrialSpec>> {
    check_unique_ids(dataset)?;
    config.validate()?;
    let k = dataset.k();
    let per_question = exec::map(execution, dataset.questions(), |q| {
        let mut out = Vec::with_capacity(k * config.trials_per_position as usize);
        for anchor in OptionPosition::all(k) {
            for rep in 0..config.trials_per_position {
                out.push(make_trial(
                    "balanced",
                    q,
                    Protocol::Static,
                    0.0,
                    anchor,
                    rep,
                    k,
                    config.master_seed,
                )?);
            }
        }
        Ok::<_, Error>(out)
    });
    flatten(per_question)
}

fn flatten(parts: Vec<Result<Vec<TrialSpec>>>) -> Result<Vec<TrialSpec>> {
    let mut all = Vec::new();
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContentRole, Question};
    use crate::rng::stream;

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| Question {
                    id: format!("q{i:03}"),
                    stem: format!("stem {i}"),
                    correct_content: "right".into(),
                    distractor_contents: vec!["w1".into(), "w2".into(), "w3".into()],
                    original_correct_position: OptionPosition::at(0),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn theta_zero_keeps_anchor() {
        let mut rng = stream(1);
        for protocol in [Protocol::Inclusive, Protocol::Exclusive, Protocol::Static] {
            for a in 0..4 {
                for _ in 0..200 {
                    let (p, b) =
                        draw_correct_position(0.0, OptionPosition::at(a), protocol, 4, &mut rng)
                            .unwrap();
                    assert_eq!(p.index(), a);
                    assert_eq!(b, Branch::Fixed);
                }
            }
        }
    }

    #[test]
    fn exclusive_theta_one_never_hits_anchor() {
        let mut rng = stream(2);
        let d = OptionPosition::at(3);
        let mut seen = [false; 4];
        for _ in 0..2000 {
            let (p, b) = draw_correct_position(1.0, d, Protocol::Exclusive, 4, &mut rng).unwrap();
            assert_ne!(p, d);
            assert_eq!(b, Branch::Randomized);
            seen[p.index()] = true;
        }
        assert_eq!(seen, [true, true, true, false]);
    }

    #[test]
    fn inclusive_theta_one_is_uniform() {
        let mut rng = stream(3);
        let n = 40_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            let (p, _) =
                draw_correct_position(1.0, OptionPosition::at(1), Protocol::Inclusive, 4, &mut rng)
                    .unwrap();
            counts[p.index()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn exclusive_rejects_single_option() {
        let err = draw_correct_position(
            0.5,
            OptionPosition::at(0),
            Protocol::Exclusive,
            1,
            &mut stream(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn sweep_plan_size_matches_dimensions() {
        // 198 questions x 1 theta x 1 protocol x 4 anchors x 100 trials
        let ds = dataset(198);
        let cfg = SweepConfig {
            theta_grid: vec![0.5],
            protocols: vec![Protocol::Inclusive],
            anchor_positions: vec![],
            trials_per_cell: 100,
            master_seed: 9,
        };
        let plan = build_sweep_plan(&ds, &cfg, Execution::Parallel).unwrap();
        assert_eq!(plan.len(), 79_200);
        let ids: HashSet<&str> = plan.iter().map(|t| t.trial_id.as_str()).collect();
        assert_eq!(ids.len(), plan.len());
    }

    #[test]
    fn sweep_theta_zero_places_correct_at_anchor() {
        let ds = dataset(5);
        let cfg = SweepConfig {
            theta_grid: vec![0.0],
            trials_per_cell: 10,
            ..SweepConfig::new(4)
        };
        for t in build_sweep_plan(&ds, &cfg, Execution::Sequential).unwrap() {
            assert_eq!(t.arrangement.correct_position, t.anchor_position);
            assert_eq!(t.branch, Branch::Fixed);
        }
    }

    #[test]
    fn randomized_fraction_tracks_theta() {
        let ds = dataset(25);
        let cfg = SweepConfig {
            theta_grid: vec![0.5],
            protocols: vec![Protocol::Exclusive],
            anchor_positions: vec![],
            trials_per_cell: 100,
            master_seed: 77,
        };
        let plan = build_sweep_plan(&ds, &cfg, Execution::Parallel).unwrap();
        assert_eq!(plan.len(), 10_000);
        let randomized = plan.iter().filter(|t| t.branch == Branch::Randomized).count();
        let f = randomized as f64 / plan.len() as f64;
        assert!((f - 0.5).abs() <= 0.015, "randomized fraction {f}");
        // exclusion is exact on the randomized branch
        assert!(plan
            .iter()
            .filter(|t| t.branch == Branch::Randomized)
            .all(|t| t.arrangement.correct_position != t.anchor_position));
    }

    #[test]
    fn plans_are_deterministic_across_execution_modes() {
        let ds = dataset(7);
        let cfg = SweepConfig {
            trials_per_cell: 3,
            ..SweepConfig::new(123)
        };
        let a = build_sweep_plan(&ds, &cfg, Execution::Parallel).unwrap();
        let b = build_sweep_plan(&ds, &cfg, Execution::Sequential).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = build_sweep_plan(&ds, &SweepConfig { master_seed: 124, ..cfg }, Execution::Parallel)
            .unwrap();
        assert_ne!(a[0].trial_id, c[0].trial_id);
    }

    #[test]
    fn protocols_share_streams_at_theta_zero() {
        let ds = dataset(2);
        let cfg = SweepConfig {
            theta_grid: vec![0.0, 0.5],
            trials_per_cell: 4,
            ..SweepConfig::new(8)
        };
        let plan = build_sweep_plan(&ds, &cfg, Execution::Sequential).unwrap();
        let (inc, exc): (Vec<_>, Vec<_>) =
            plan.iter().partition(|t| t.protocol == Protocol::Inclusive);
        assert_eq!(inc.len(), exc.len());
        for (i, e) in inc.iter().zip(&exc) {
            assert_ne!(i.trial_id, e.trial_id);
            assert_eq!(i.rng_seed, e.rng_seed);
            if i.theta == 0.0 {
                assert_eq!(i.arrangement, e.arrangement);
            }
        }
    }

    #[test]
    fn balanced_plan_counts() {
        let ds = dataset(1);
        let cfg = BalancedDesignConfig {
            trials_per_position: 100,
            master_seed: 5,
        };
        let plan = build_balanced_plan(&ds, &cfg, Execution::Parallel).unwrap();
        assert_eq!(plan.len(), 400);
        let mut per = [0; 4];
        for t in &plan {
            assert_eq!(t.protocol, Protocol::Static);
            assert_eq!(t.arrangement.correct_position, t.anchor_position);
            assert_eq!(t.arrangement.role_of(t.anchor_position), ContentRole::Correct);
            per[t.anchor_position.index()] += 1;
        }
        assert_eq!(per, [100; 4]);

        let one = build_balanced_plan(
            &dataset(3),
            &BalancedDesignConfig {
                trials_per_position: 1,
                master_seed: 5,
            },
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(one.len(), 12);
    }

    #[test]
    fn config_validation() {
        let ds = dataset(1);
        let mut cfg = SweepConfig::new(0);
        cfg.theta_grid = vec![0.2, 0.1];
        assert!(build_sweep_plan(&ds, &cfg, Execution::Sequential).is_err());
        cfg.theta_grid = vec![0.0, 1.5];
        assert!(build_sweep_plan(&ds, &cfg, Execution::Sequential).is_err());
        cfg.theta_grid = vec![0.0];
        cfg.trials_per_cell = 0;
        assert!(build_sweep_plan(&ds, &cfg, Execution::Sequential).is_err());
    }
}
