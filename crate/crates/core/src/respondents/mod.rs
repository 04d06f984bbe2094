//! Black-box respondents: anything that maps a rendered question to a chosen
//! position.

mod cache;
mod http;
mod parse;
mod synthetic;

pub use cache::{CachedResponse, ResponseCache};
pub use http::{
    render_prompt, ChatTransport, FaultInjectingTransport, HttpReply, HttpRespondent,
    HttpRespondentConfig, RetryPolicy, UreqTransport, API_KEY_ENV,
};
pub use parse::{parse_answer, ParseFailure};
pub use synthetic::{
    synthetic_respond, AgentProfile, MemorizationVariant, StrategyTriple, SyntheticAgentSpec,
    SyntheticCohort,
};

use thiserror::Error;

use crate::model::{OptionPosition, Question, TrialSpec};

/// A respondent's selection plus audit data.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub selected_position: OptionPosition,
    pub raw_response: Option<String>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RespondError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("unparseable response ({failure}): {raw:?}")]
    Parse { failure: ParseFailure, raw: String },
    #[error("authentication failed: {0}")]
    Auth(String),
}

impl RespondError {
    pub fn raw_response(&self) -> Option<&str> {
        match self {
            RespondError::Parse { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

/// The respondent contract. Implementations must be callable from several
/// threads at once and must either return a position or a typed error.
pub trait Respondent: Send + Sync {
    fn respond(&self, question: &Question, trial: &TrialSpec) -> Result<Response, RespondError>;

    /// Upper bound on concurrent calls the runner may issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Configuration snapshot recorded in run manifests.
    fn describe(&self) -> serde_json::Value;
}
