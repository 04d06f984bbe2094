//! Domain types shared by every stage: questions, arrangements, trials and
//! outcomes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Option count used by GPQA-style datasets.
pub const DEFAULT_K: usize = 4;

/// A slot in the rendered option list; index 0 is displayed as "A".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OptionPosition(u8);

impl OptionPosition {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        if index >= k || k > 26 {
            return Err(Error::invalid(format!(
                "position index {index} out of range for k={k}"
            )));
        }
        Ok(OptionPosition(index as u8))
    }

    /// Unchecked constructor for indices already known to be below k.
    pub(crate) fn at(index: usize) -> Self {
        debug_assert!(index < 26);
        OptionPosition(index as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn from_label(label: &str) -> Result<Self> {
        let mut chars = label.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => {
                Ok(OptionPosition(c.to_ascii_uppercase() as u8 - b'A'))
            }
            _ => Err(Error::invalid(format!("`{label}` is not an option letter"))),
        }
    }

    /// All positions for an option count.
    pub fn all(k: usize) -> impl Iterator<Item = OptionPosition> {
        (0..k).map(OptionPosition::at)
    }

    pub fn check(self, k: usize) -> Result<Self> {
        OptionPosition::new(self.index(), k)
    }
}

impl fmt::Display for OptionPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for OptionPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OptionPosition::from_label(s)
    }
}

impl Serialize for OptionPosition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_char(self.label())
    }
}

impl<'de> Deserialize<'de> for OptionPosition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OptionPosition::from_label(&s).map_err(serde::de::Error::custom)
    }
}

/// What sits in a position, independent of where it was placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContentRole {
    Correct,
    /// 1-based distractor index, matching the dataset's distractor order.
    Distractor(u8),
}

impl ContentRole {
    /// Slot in a role-count vector: Correct is 0, Distractor(i) is i.
    pub fn slot(self) -> usize {
        match self {
            ContentRole::Correct => 0,
            ContentRole::Distractor(i) => i as usize,
        }
    }

    pub fn is_correct(self) -> bool {
        self == ContentRole::Correct
    }
}

impl fmt::Display for ContentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContentRole::Correct => write!(f, "correct"),
            ContentRole::Distractor(i) => write!(f, "distractor:{i}"),
        }
    }
}

impl FromStr for ContentRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "correct" {
            return Ok(ContentRole::Correct);
        }
        s.strip_prefix("distractor:")
            .and_then(|i| i.parse::<u8>().ok())
            .filter(|&i| i >= 1)
            .map(ContentRole::Distractor)
            .ok_or_else(|| Error::invalid(format!("unknown content role `{s}`")))
    }
}

impl Serialize for ContentRole {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A multiple-choice item as published in the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "question")]
    pub stem: String,
    #[serde(rename = "correct")]
    pub correct_content: String,
    #[serde(rename = "distractors")]
    pub distractor_contents: Vec<String>,
    #[serde(rename = "original_position", default = "default_original")]
    pub original_correct_position: OptionPosition,
}

fn default_original() -> OptionPosition {
    OptionPosition(0)
}

impl Question {
    pub fn k(&self) -> usize {
        self.distractor_contents.len() + 1
    }

    /// Checks distinct contents and a valid original position.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(Error::invalid(format!(
                "question `{}` needs at least one distractor",
                self.id
            )));
        }
        self.original_correct_position.check(k)?;
        let mut seen = std::collections::HashSet::new();
        for text in std::iter::once(&self.correct_content).chain(&self.distractor_contents) {
            if !seen.insert(text.as_str()) {
                return Err(Error::invalid(format!(
                    "question `{}` repeats option content `{text}`",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn content(&self, role: ContentRole) -> &str {
        match role {
            ContentRole::Correct => &self.correct_content,
            ContentRole::Distractor(i) => &self.distractor_contents[i as usize - 1],
        }
    }
}

/// A validated question set with a single option count.
#[derive(Debug, Clone)]
pub struct Dataset {
    k: usize,
    questions: Vec<Question>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(questions: Vec<Question>) -> Result<Self> {
        let first = questions
            .first()
            .ok_or_else(|| Error::invalid("empty dataset"))?;
        let k = first.k();
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            q.validate()?;
            if q.k() != k {
                return Err(Error::Dataset {
                    location: format!("entry {i} (id `{}`)", q.id),
                    message: format!("has {} options, expected {k}", q.k()),
                });
            }
            if index.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateQuestion(q.id.clone()));
            }
        }
        Ok(Dataset {
            k,
            questions,
            index,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// A concrete placement of a question's contents into positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrangement {
    pub question_id: String,
    pub placement: Vec<ContentRole>,
    pub correct_position: OptionPosition,
}

impl Arrangement {
    pub fn k(&self) -> usize {
        self.placement.len()
    }

    pub fn role_of(&self, position: OptionPosition) -> ContentRole {
        self.placement[position.index()]
    }

    /// Position holding a given role.
    pub fn position_of(&self, role: ContentRole) -> Option<OptionPosition> {
        self.placement
            .iter()
            .position(|&r| r == role)
            .map(OptionPosition::at)
    }

    /// Checks the placement is a permutation with Correct at `correct_position`.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        self.correct_position.check(k)?;
        let mut seen = vec![false; k];
        for role in &self.placement {
            let slot = role.slot();
            if slot >= k || seen[slot] {
                return Err(Error::invalid(format!(
                    "arrangement for `{}` is not a permutation of roles",
                    self.question_id
                )));
            }
            seen[slot] = true;
        }
        if self.role_of(self.correct_position) != ContentRole::Correct {
            return Err(Error::invalid(format!(
                "arrangement for `{}` does not hold Correct at {}",
                self.question_id, self.correct_position
            )));
        }
        Ok(())
    }
}

/// Place the correct content at `correct_position` and shuffle distractors
/// uniformly over the remaining positions.
pub fn arrange<R: Rng + ?Sized>(
    question: &Question,
    correct_position: OptionPosition,
    rng: &mut R,
) -> Arrangement {
    let k = question.k();
    debug_assert!(correct_position.index() < k);
    let mut distractors: Vec<ContentRole> = (1..k as u8).map(ContentRole::Distractor).collect();
    distractors.shuffle(rng);
    let mut rest = distractors.into_iter();
    let placement = (0..k)
        .map(|p| {
            if p == correct_position.index() {
                ContentRole::Correct
            } else {
                rest.next().expect("k-1 distractors for k-1 slots")
            }
        })
        .collect();
    Arrangement {
        question_id: question.id.clone(),
        placement,
        correct_position,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Inclusive,
    Exclusive,
    Static,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Inclusive => "inclusive",
            Protocol::Exclusive => "exclusive",
            Protocol::Static => "static",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inclusive" | "inc" => Ok(Protocol::Inclusive),
            "exclusive" | "exc" => Ok(Protocol::Exclusive),
            "static" => Ok(Protocol::Static),
            other => Err(Error::invalid(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Which arm of the theta coin a trial took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fixed,
    Randomized,
}

/// One planned probe. Field order here is the canonical key order of plan files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: String,
    pub question_id: String,
    pub theta: f64,
    pub protocol: Protocol,
    pub anchor_position: OptionPosition,
    pub replicate: u32,
    pub branch: Branch,
    pub arrangement: Arrangement,
    pub rng_seed: u64,
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!(
                "trial {} has theta {} outside [0,1]",
                self.trial_id, self.theta
            )));
        }
        if self.arrangement.question_id != self.question_id {
            return Err(Error::invalid(format!(
                "trial {} arrangement belongs to another question",
                self.trial_id
            )));
        }
        self.anchor_position.check(self.arrangement.k())?;
        self.arrangement.validate()
    }
}

/// The respondent's realized selection for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: String,
    pub selected_position: OptionPosition,
    pub selected_role: ContentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl TrialOutcome {
    /// Builds an outcome whose role is read off the arrangement.
    pub fn from_selection(
        spec: &TrialSpec,
        selected_position: OptionPosition,
        raw_response: Option<String>,
        latency_ms: Option<u64>,
    ) -> Self {
        TrialOutcome {
            trial_id: spec.trial_id.clone(),
            selected_position,
            selected_role: spec.arrangement.role_of(selected_position),
            raw_response,
            latency_ms,
        }
    }
}

/// Probability distribution over positions (or roles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDistribution {
    probs: Vec<f64>,
}

impl PositionDistribution {
    const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution over zero positions"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("probabilities {probs:?} outside [0,1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(PositionDistribution { probs })
    }

    pub fn uniform(k: usize) -> Self {
        PositionDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// Normalized empirical frequencies.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Undefined("distribution from zero counts".into()));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(PositionDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    pub(crate) fn question(id: &str) -> Question {
        Question {
            id: id.into(),
            stem: "What is 2 + 2?".into(),
            correct_content: "4".into(),
            distractor_contents: vec!["3".into(), "5".into(), "22".into()],
            original_correct_position: OptionPosition::at(0),
        }
    }

    #[test]
    fn position_labels() {
        assert_eq!(OptionPosition::at(0).label(), 'A');
        assert_eq!(OptionPosition::at(3).to_string(), "D");
        assert_eq!(OptionPosition::from_label("c").unwrap().index(), 2);
        assert!(OptionPosition::new(4, 4).is_err());
        assert!(OptionPosition::from_label("AB").is_err());
    }

    #[test]
    fn arrange_forces_correct_and_is_deterministic() {
        let q = question("q1");
        for p in 0..4 {
            let pos = OptionPosition::at(p);
            let a = arrange(&q, pos, &mut stream(11));
            let b = arrange(&q, pos, &mut stream(11));
            assert_eq!(a, b);
            assert_eq!(a.role_of(pos), ContentRole::Correct);
            a.validate().unwrap();
        }
    }

    #[test]
    fn role_of_covers_every_role_once() {
        let q = question("q1");
        let a = arrange(&q, OptionPosition::at(2), &mut stream(3));
        let mut roles: Vec<ContentRole> = OptionPosition::all(4).map(|p| a.role_of(p)).collect();
        roles.sort();
        assert_eq!(
            roles,
            vec![
                ContentRole::Correct,
                ContentRole::Distractor(1),
                ContentRole::Distractor(2),
                ContentRole::Distractor(3)
            ]
        );
        for p in OptionPosition::all(4).filter(|&p| p != a.correct_position) {
            assert!(matches!(a.role_of(p), ContentRole::Distractor(_)));
        }
    }

    #[test]
    fn distractor_placement_is_uniform() {
        // 12,000 arrangements with Correct at A; each distractor should occupy
        // each of B, C, D a third of the time.
        let q = question("q1");
        let mut rng = stream(2024);
        let mut counts = [[0u32; 4]; 4];
        let n = 12_000;
        for _ in 0..n {
            let a = arrange(&q, OptionPosition::at(0), &mut rng);
            for (p, role) in a.placement.iter().enumerate() {
                counts[role.slot()][p] += 1;
            }
        }
        for d in 1..4 {
            assert_eq!(counts[d][0], 0);
            for p in 1..4 {
                let f = counts[d][p] as f64 / n as f64;
                assert!((f - 1.0 / 3.0).abs() <= 0.02, "distractor {d} at {p}: {f}");
            }
        }
    }

    #[test]
    fn dataset_rejects_duplicates_and_mixed_k() {
        let err = Dataset::new(vec![question("a"), question("a")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateQuestion(id) if id == "a"));
        let mut short = question("b");
        short.distractor_contents.pop();
        let err = Dataset::new(vec![question("a"), short]).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        assert!(Dataset::new(vec![]).unwrap_err().to_string().contains("empty dataset"));
    }

    #[test]
    fn question_rejects_repeated_content() {
        let mut q = question("a");
        q.distractor_contents[1] = "4".into();
        assert!(q.validate().is_err());
    }

    #[test]
    fn distribution_normalization() {
        assert!(PositionDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(PositionDistribution::new(vec![0.5, 0.6]).is_err());
        let d = PositionDistribution::from_counts(&[1, 2, 3, 4]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(PositionDistribution::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn role_strings() {
        assert_eq!("correct".parse::<ContentRole>().unwrap(), ContentRole::Correct);
        assert_eq!(
            "distractor:3".parse::<ContentRole>().unwrap(),
            ContentRole::Distractor(3)
        );
        assert!("distractor:0".parse::<ContentRole>().is_err());
    }

    proptest! {
        #[test]
        fn arrangement_json_round_trips(seed in any::<u64>(), p in 0usize..4) {
            let q = question("q");
            let a = arrange(&q, OptionPosition::at(p), &mut stream(seed));
            let text = serde_json::to_string(&a).unwrap();
            let back: Arrangement = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
        }

        #[test]
        fn counts_always_normalize(counts in proptest::collection::vec(0u64..1000, 1..8)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let d = PositionDistribution::from_counts(&counts).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(PositionDistribution::new(d.probs().to_vec()).is_ok());
        }
    }
}
