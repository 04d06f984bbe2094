//! Synthetic respondents with known strategy mixtures.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RespondError, Respondent, Response};
use crate::error::{Error, Result};
use crate::model::{Arrangement, OptionPosition, Question, TrialSpec};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorizationVariant {
    /// Picks o_m when the answer is there, otherwise selects uniformly.
    #[default]
    PaperFaithful,
    /// Always picks o_m.
    StrictMemorizer,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentSpec {
    pub p_m: f64,
    pub p_r: f64,
    pub p_g: f64,
    pub o_m: OptionPosition,
    #[serde(default)]
    pub variant: MemorizationVariant,
    /// Chance that a reasoning step lands on the correct content.
    #[serde(default = "one")]
    pub reasoning_success: f64,
    /// Optional non-uniform weights for the guessing strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess_weights: Option<Vec<f64>>,
}

impl SyntheticAgentSpec {
    pub fn new(p_m: f64, p_r: f64, p_g: f64, o_m: OptionPosition) -> Self {
        SyntheticAgentSpec {
            p_m,
            p_r,
            p_g,
            o_m,
            variant: MemorizationVariant::PaperFaithful,
            reasoning_success: 1.0,
            guess_weights: None,
        }
    }

    pub fn strict(mut self) -> Self {
        self.variant = MemorizationVariant::StrictMemorizer;
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let ps = [self.p_m, self.p_r, self.p_g];
        if ps.iter().any(|p| !(*p >= 0.0)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "strategy probabilities {ps:?} are not on the simplex"
            )));
        }
        if !(0.0..=1.0).contains(&self.reasoning_success) {
            return Err(Error::invalid("reasoning_success outside [0,1]"));
        }
        self.o_m.check(k)?;
        if let Some(w) = &self.guess_weights {
            if w.len() != k || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("guess_weights must be k non-negative weights"));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(k: usize, rng: &mut R) -> OptionPosition {
    OptionPosition::at(rng.random_range(0..k))
}

fn weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> OptionPosition {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return OptionPosition::at(i);
        }
        u -= w;
    }
    // rounding at the top end
    OptionPosition::at(weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
}

/// One draw from the agent's strategy mixture.
pub fn synthetic_respond<R: Rng + ?Sized>(
    spec: &SyntheticAgentSpec,
    arrangement: &Arrangement,
    rng: &mut R,
) -> OptionPosition {
    let k = arrangement.k();
    let correct = arrangement.correct_position;
    let u = rng.random::<f64>();
    if u < spec.p_m {
        match spec.variant {
            MemorizationVariant::StrictMemorizer => spec.o_m,
            MemorizationVariant::PaperFaithful if correct == spec.o_m => spec.o_m,
            MemorizationVariant::PaperFaithful => uniform(k, rng),
        }
    } else if u < spec.p_m + spec.p_r {
        if rng.random::<f64>() < spec.reasoning_success {
            correct
        } else {
            // a wrong conclusion lands on one of the distractors
            let i = rng.random_range(0..k - 1);
            OptionPosition::at(if i >= correct.index() { i + 1 } else { i })
        }
    } else {
        match &spec.guess_weights {
            Some(w) => weighted(w, rng),
            None => uniform(k, rng),
        }
    }
}

/// Strategy probabilities only, used for theta drift endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyTriple {
    pub p_m: f64,
    pub p_r: f64,
    pub p_g: f64,
}

/// An agent whose mixture may drift linearly with theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    #[serde(flatten)]
    pub spec: SyntheticAgentSpec,
    /// Mixture reached at theta = 1; the base mixture applies at theta = 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_to: Option<StrategyTriple>,
}

impl From<SyntheticAgentSpec> for AgentProfile {
    fn from(spec: SyntheticAgentSpec) -> Self {
        AgentProfile {
            spec,
            drift_to: None,
        }
    }
}

impl AgentProfile {
    pub fn at_theta(&self, theta: f64) -> SyntheticAgentSpec {
        match self.drift_to {
            None => self.spec.clone(),
            Some(end) => {
                let lerp = |a: f64, b: f64| a + (b - a) * theta;
                let p_m = lerp(self.spec.p_m, end.p_m);
                let p_r = lerp(self.spec.p_r, end.p_r);
                SyntheticAgentSpec {
                    p_m,
                    p_r,
                    // keeps the triple summing to one under rounding
                    p_g: (1.0 - p_m - p_r).max(0.0),
                    ..self.spec.clone()
                }
            }
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.spec.validate(k)?;
        if let Some(end) = self.drift_to {
            let end_spec = SyntheticAgentSpec {
                p_m: end.p_m,
                p_r: end.p_r,
                p_g: end.p_g,
                ..self.spec.clone()
            };
            end_spec.validate(k)?;
        }
        Ok(())
    }
}

/// A synthetic respondent: one default profile plus per-question overrides.
/// This is also the on-disk format of `--respondent synthetic:<file>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohort {
    pub default: AgentProfile,
    #[serde(default)]
    pub questions: BTreeMap<String, AgentProfile>,
}

impl SyntheticCohort {
    pub fn uniform(profile: impl Into<AgentProfile>) -> Self {
        SyntheticCohort {
            default: profile.into(),
            questions: BTreeMap::new(),
        }
    }

    pub fn with_question(mut self, id: impl Into<String>, profile: impl Into<AgentProfile>) -> Self {
        self.questions.insert(id.into(), profile.into());
        self
    }

    pub fn profile(&self, question_id: &str) -> &AgentProfile {
        self.questions.get(question_id).unwrap_or(&self.default)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.default.validate(k)?;
        for p in self.questions.values() {
            p.validate(k)?;
        }
        Ok(())
    }
}

impl Respondent for SyntheticCohort {
    fn respond(&self, _question: &Question, trial: &TrialSpec) -> Result<Response, RespondError> {
        let spec = self.profile(&trial.question_id).at_theta(trial.theta);
        let mut rng = substream(trial.rng_seed, "respond");
        Ok(Response {
            selected_position: synthetic_respond(&spec, &trial.arrangement, &mut rng),
            raw_response: None,
            latency_ms: None,
        })
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "synthetic", "cohort": self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{arrange, Question};
    use crate::rng::stream;

    fn q() -> Question {
        Question {
            id: "q".into(),
            stem: "s".into(),
            correct_content: "c".into(),
            distractor_contents: vec!["x".into(), "y".into(), "z".into()],
            original_correct_position: OptionPosition::at(0),
        }
    }

    fn accuracy_at(spec: &SyntheticAgentSpec, correct: usize, n: usize, seed: u64) -> f64 {
        let mut rng = stream(seed);
        let mut hits = 0;
        for _ in 0..n {
            let a = arrange(&q(), OptionPosition::at(correct), &mut rng);
            if synthetic_respond(spec, &a, &mut rng) == a.correct_position {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn ideal_reasoner_is_always_right() {
        let spec = SyntheticAgentSpec::new(0.0, 1.0, 0.0, OptionPosition::at(0));
        for c in 0..4 {
            assert_eq!(accuracy_at(&spec, c, 500, c as u64), 1.0);
        }
    }

    #[test]
    fn strict_memorizer_misses_off_position() {
        let spec = SyntheticAgentSpec::new(1.0, 0.0, 0.0, OptionPosition::at(0)).strict();
        assert_eq!(accuracy_at(&spec, 1, 500, 1), 0.0);
        assert_eq!(accuracy_at(&spec, 0, 500, 1), 1.0);
    }

    #[test]
    fn paper_faithful_marginals() {
        // (0.47, 0.26, 0.27) with o_m = A: A_om = 0.7975, A_other = 0.445
        let spec = SyntheticAgentSpec::new(0.47, 0.26, 0.27, OptionPosition::at(0));
        let n = 10_000;
        let a_om = accuracy_at(&spec, 0, n, 10);
        let a_other = (1..4).map(|c| accuracy_at(&spec, c, n, 10 + c as u64)).sum::<f64>() / 3.0;
        assert!((a_om - 0.8).abs() <= 0.01, "{a_om}");
        assert!((a_other - 0.45).abs() <= 0.01, "{a_other}");
    }

    #[test]
    fn failed_reasoning_picks_a_distractor() {
        let mut spec = SyntheticAgentSpec::new(0.0, 1.0, 0.0, OptionPosition::at(0));
        spec.reasoning_success = 0.0;
        assert_eq!(accuracy_at(&spec, 2, 300, 4), 0.0);
    }

    #[test]
    fn validation() {
        let bad = SyntheticAgentSpec::new(0.5, 0.5, 0.1, OptionPosition::at(0));
        assert!(bad.validate(4).is_err());
        let neg = SyntheticAgentSpec::new(1.2, -0.2, 0.0, OptionPosition::at(0));
        assert!(neg.validate(4).is_err());
        let off = SyntheticAgentSpec::new(1.0, 0.0, 0.0, OptionPosition::at(5));
        assert!(off.validate(4).is_err());
    }

    #[test]
    fn drift_interpolates() {
        let p = AgentProfile {
            spec: SyntheticAgentSpec::new(0.0, 0.0, 1.0, OptionPosition::at(0)),
            drift_to: Some(StrategyTriple {
                p_m: 0.0,
                p_r: 1.0,
                p_g: 0.0,
            }),
        };
        let mid = p.at_theta(0.3);
        assert!((mid.p_r - 0.3).abs() < 1e-12);
        assert!((mid.p_g - 0.7).abs() < 1e-12);
        p.validate(4).unwrap();
    }

    #[test]
    fn cohort_file_format() {
        let text = r#"{
            "default": {"p_m": 0.2, "p_r": 0.5, "p_g": 0.3, "o_m": "A"},
            "questions": {"q7": {"p_m": 1.0, "p_r": 0.0, "p_g": 0.0, "o_m": "B", "variant": "strict_memorizer"}}
        }"#;
        let c: SyntheticCohort = serde_json::from_str(text).unwrap();
        c.validate(4).unwrap();
        assert_eq!(c.profile("q7").spec.variant, MemorizationVariant::StrictMemorizer);
        assert_eq!(c.profile("other").spec.reasoning_success, 1.0);
    }
}
