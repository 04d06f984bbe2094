use std::sync::OnceLock;

use regex::Regex;

use crate::model::OptionPosition;

/// Why a response could not be mapped to a single option.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseFailure {
    NoLetter,
    Ambiguous(Vec<char>),
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseFailure::NoLetter => write!(f, "no option letter in response"),
            ParseFailure::Ambiguous(c) => write!(f, "ambiguous option letters {c:?}"),
        }
    }
}

fn standalone() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").unwrap())
}

fn bare_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\W*([A-Za-z])\W*$").unwrap())
}

fn cued() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\banswer\s*(?:is|:)?\s*(?:option\s*)?[(\[]?([a-z])\b").unwrap()
    })
}

/// Map a free-text reply to an option position.
///
/// A reply that is only a letter ("b", "(C)") is accepted in either case.
/// Otherwise the standalone capital letters naming valid options are
/// collected. An explicit "answer is X" / "answer: X" cue takes precedence
/// (the last cue in the text wins); without a cue exactly one distinct letter
/// is required, and several are ambiguous.
pub fn parse_answer(text: &str, k: usize) -> Result<OptionPosition, ParseFailure> {
    let in_range = |c: char| {
        let u = c.to_ascii_uppercase();
        u.is_ascii_uppercase() && ((u as u8 - b'A') as usize) < k
    };
    let to_pos = |c: char| OptionPosition::at((c.to_ascii_uppercase() as u8 - b'A') as usize);

    if let Some(cap) = bare_letter().captures(text) {
        let c = cap[1].chars().next().unwrap();
        return if in_range(c) {
            Ok(to_pos(c))
        } else {
            Err(ParseFailure::NoLetter)
        };
    }

    let mut distinct: Vec<char> = Vec::new();
    for cap in standalone().captures_iter(text) {
        let c = cap[1].chars().next().unwrap();
        if in_range(c) && !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    let last_cue = cued()
        .captures_iter(text)
        .filter_map(|cap| cap[1].chars().next())
        .filter(|&c| in_range(c))
        .last();

    match (last_cue, distinct.len()) {
        (Some(c), _) => Ok(to_pos(c)),
        (None, 1) => Ok(to_pos(distinct[0])),
        (None, 0) => Err(ParseFailure::NoLetter),
        (None, _) => {
            distinct.sort_unstable();
            Err(ParseFailure::Ambiguous(distinct))
        }
    }
}
