//! OpenAI-compatible chat-completions respondent.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::{CachedResponse, ResponseCache};
use super::parse::parse_answer;
use super::{RespondError, Respondent, Response};
use crate::error::{Error, Result};
use crate::model::{Arrangement, OptionPosition, Question, TrialSpec};
use crate::rng::{stream, StreamRng};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "STRATEGEM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before attempt n+1 is `backoff_ms[min(n, len-1)]`.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![500, 2_000, 8_000],
        }
    }
}

impl RetryPolicy {
    fn delay(&self, failed_attempts: u32) -> Duration {
        let i = (failed_attempts as usize).saturating_sub(1);
        let ms = self
            .backoff_ms
            .get(i)
            .or(self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRespondentConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub prompt_template_id: String,
}

impl Default for HttpRespondentConfig {
    fn default() -> Self {
        HttpRespondentConfig {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
            prompt_template_id: "direct-v1".into(),
        }
    }
}

impl HttpRespondentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be at least 1"));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::invalid("retry.max_attempts must be at least 1"));
        }
        if self.prompt_template_id != "direct-v1" {
            return Err(Error::invalid(format!(
                "unknown prompt template `{}`",
                self.prompt_template_id
            )));
        }
        Ok(())
    }
}

/// Stem followed by lettered options and a one-letter instruction.
pub fn render_prompt(question: &Question, arrangement: &Arrangement, template_id: &str) -> String {
    debug_assert_eq!(template_id, "direct-v1");
    let k = arrangement.k();
    let mut out = String::new();
    out.push_str(question.stem.trim());
    out.push_str("\n\n");
    for p in OptionPosition::all(k) {
        out.push_str(&format!("{}) {}\n", p.label(), question.content(arrangement.role_of(p))));
    }
    let letters: Vec<String> = OptionPosition::all(k).map(|p| p.label().to_string()).collect();
    out.push_str(&format!(
        "\nAnswer with a single letter ({}).",
        letters.join(", ")
    ));
    out
}

/// Status line and body of an HTTP exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Something that can POST a JSON body. Errors are transport-level failures
/// (connection refused, timeout); HTTP error statuses come back as replies.
pub trait ChatTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        UreqTransport {
            agent: config.into(),
        }
    }
}

impl ChatTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        _timeout: Duration,
    ) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Wraps a transport and fails a fixed fraction of calls before they are sent.
pub struct FaultInjectingTransport<T> {
    inner: T,
    fault_rate: f64,
    rng: Mutex<StreamRng>,
}

impl<T> FaultInjectingTransport<T> {
    pub fn new(inner: T, fault_rate: f64, seed: u64) -> Self {
        FaultInjectingTransport {
            inner,
            fault_rate,
            rng: Mutex::new(stream(seed)),
        }
    }
}

impl<T: ChatTransport> ChatTransport for FaultInjectingTransport<T> {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String> {
        let fault = self.rng.lock().unwrap().random::<f64>() < self.fault_rate;
        if fault {
            return Err("injected transport fault".into());
        }
        self.inner.post_json(url, api_key, body, timeout)
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpRespondent {
    config: HttpRespondentConfig,
    api_key: Option<String>,
    transport: Box<dyn ChatTransport>,
    cache: Option<Arc<ResponseCache>>,
    in_flight: InFlight,
    sleep: Sleeper,
}

enum Attempt {
    Done(String),
    Retry(RespondError),
    Fatal(RespondError),
}

impl HttpRespondent {
    pub fn new(
        config: HttpRespondentConfig,
        api_key: Option<String>,
        transport: Box<dyn ChatTransport>,
    ) -> Result<Self> {
        config.validate()?;
        let limit = config.max_in_flight;
        Ok(HttpRespondent {
            config,
            api_key,
            transport,
            cache: None,
            in_flight: InFlight {
                limit,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            sleep: Arc::new(std::thread::sleep),
        })
    }

    /// Respondent backed by ureq, reading the key from the environment.
    pub fn from_env(config: HttpRespondentConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV).ok();
        let transport = UreqTransport::new(Duration::from_millis(config.timeout_ms));
        Self::new(config, key, Box::new(transport))
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Replace the backoff sleep (tests use a no-op).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn config(&self) -> &HttpRespondentConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let reply = match self.transport.post_json(
            &self.url(),
            self.api_key.as_deref(),
            body,
            Duration::from_millis(self.config.timeout_ms),
        ) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(RespondError::Transport(e)),
        };
        match reply.status {
            200..=299 => match extract_content(&reply.body) {
                Some(text) => Attempt::Done(text),
                None => Attempt::Fatal(RespondError::Transport(format!(
                    "response without choices[0].message.content: {}",
                    truncate(&reply.body)
                ))),
            },
            401 | 403 => Attempt::Fatal(RespondError::Auth(truncate(&reply.body))),
            429 => Attempt::Retry(RespondError::RateLimited(truncate(&reply.body))),
            500..=599 | 408 => Attempt::Retry(RespondError::Transport(format!(
                "HTTP {}: {}",
                reply.status,
                truncate(&reply.body)
            ))),
            s => Attempt::Fatal(RespondError::Transport(format!(
                "HTTP {s}: {}",
                truncate(&reply.body)
            ))),
        }
    }

    fn finish(&self, spec: &TrialSpec, raw: String, latency: Option<u64>) -> Result<Response, RespondError> {
        match parse_answer(&raw, spec.arrangement.k()) {
            Ok(p) => Ok(Response {
                selected_position: p,
                raw_response: Some(raw),
                latency_ms: latency,
            }),
            Err(failure) => Err(RespondError::Parse { failure, raw }),
        }
    }
}

fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?
        .as_str()
        .map(str::to_owned)
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

impl Respondent for HttpRespondent {
    fn respond(&self, question: &Question, trial: &TrialSpec) -> Result<Response, RespondError> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&trial.trial_id)) {
            return self.finish(trial, hit.raw_response, None);
        }
        let prompt = render_prompt(question, &trial.arrangement, &self.config.prompt_template_id);
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });

        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let mut failed = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    let latency = started.elapsed().as_millis() as u64;
                    if let Some(cache) = &self.cache {
                        cache
                            .insert(CachedResponse {
                                trial_id: trial.trial_id.clone(),
                                status: 200,
                                raw_response: text.clone(),
                            })
                            .map_err(|e| RespondError::Transport(format!("cache write: {e}")))?;
                    }
                    return self.finish(trial, text, Some(latency));
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    failed += 1;
                    if failed >= self.config.retry.max_attempts {
                        return Err(e);
                    }
                    (self.sleep)(self.config.retry.delay(failed));
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn describe(&self) -> Value {
        json!({ "kind": "http", "config": self.config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arrange;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn question() -> Question {
        Question {
            id: "q".into(),
            stem: "Which is prime?".into(),
            correct_content: "7".into(),
            distractor_contents: vec!["8".into(), "9".into(), "10".into()],
            original_correct_position: OptionPosition::at(0),
        }
    }

    fn trial(id: &str) -> TrialSpec {
        let q = question();
        let arrangement = arrange(&q, OptionPosition::at(2), &mut stream(1));
        TrialSpec {
            trial_id: id.into(),
            question_id: q.id,
            theta: 0.0,
            protocol: crate::model::Protocol::Static,
            anchor_position: OptionPosition::at(2),
            replicate: 0,
            branch: crate::model::Branch::Fixed,
            arrangement,
            rng_seed: 1,
        }
    }

    /// Replies from a fixed script of (status, content) pairs.
    struct Scripted {
        replies: Mutex<Vec<Result<(u16, String), String>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<(u16, String), String>>) -> Self {
            Scripted {
                replies: Mutex::new(replies.into_iter().rev().collect()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    impl ChatTransport for Scripted {
        fn post_json(&self, _: &str, _: Option<&str>, body: &Value, _: Duration) -> Result<HttpReply, String> {
            assert_eq!(body["temperature"], 0.0);
            self.calls.fetch_add(1, Ordering::SeqCst);
            let next = self.replies.lock().unwrap().pop().expect("script exhausted");
            next.map(|(status, body)| HttpReply { status, body })
        }
    }

    impl ChatTransport for Arc<Scripted> {
        fn post_json(&self, u: &str, k: Option<&str>, b: &Value, t: Duration) -> Result<HttpReply, String> {
            self.as_ref().post_json(u, k, b, t)
        }
    }

    fn respondent(script: Arc<Scripted>) -> HttpRespondent {
        HttpRespondent::new(HttpRespondentConfig::default(), Some("k".into()), Box::new(script))
            .unwrap()
            .with_sleeper(|_| {})
    }

    #[test]
    fn prompt_lists_options_in_position_order() {
        let t = trial("t");
        let p = render_prompt(&question(), &t.arrangement, "direct-v1");
        assert!(p.starts_with("Which is prime?\n\nA) "));
        assert!(p.contains("C) 7\n"));
        assert!(p.ends_with("Answer with a single letter (A, B, C, D)."));
    }

    #[test]
    fn retries_then_succeeds() {
        let s = Arc::new(Scripted::new(vec![
            Err("reset".into()),
            Ok((429, "slow down".into())),
            Ok((200, chat("The answer is C."))),
        ]));
        let r = respondent(s.clone()).respond(&question(), &trial("t")).unwrap();
        assert_eq!(r.selected_position.label(), 'C');
        assert_eq!(r.raw_response.as_deref(), Some("The answer is C."));
        assert_eq!(s.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhaustion_reports_last_error() {
        let s = Arc::new(Scripted::new(vec![
            Err("a".into()),
            Err("b".into()),
            Ok((429, "limit".into())),
        ]));
        let e = respondent(s).respond(&question(), &trial("t")).unwrap_err();
        assert!(matches!(e, RespondError::RateLimited(_)));
    }

    #[test]
    fn auth_is_not_retried() {
        let s = Arc::new(Scripted::new(vec![Ok((401, "bad key".into()))]));
        let e = respondent(s.clone()).respond(&question(), &trial("t")).unwrap_err();
        assert!(matches!(e, RespondError::Auth(_)));
        assert_eq!(s.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn parse_failure_keeps_raw_text() {
        let s = Arc::new(Scripted::new(vec![Ok((200, chat("Both A and D seem plausible")))]));
        let e = respondent(s).respond(&question(), &trial("t")).unwrap_err();
        assert_eq!(e.raw_response(), Some("Both A and D seem plausible"));
    }

    #[test]
    fn cache_replays_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path().join("c.jsonl")).unwrap());
        let s = Arc::new(Scripted::new(vec![Ok((200, chat("B")))]));
        let first = respondent(s.clone())
            .with_cache(cache.clone())
            .respond(&question(), &trial("t9"))
            .unwrap();
        // the script is now empty; a second network call would panic
        let replay_cache = Arc::new(ResponseCache::open(dir.path().join("c.jsonl")).unwrap());
        let second = respondent(s.clone())
            .with_cache(replay_cache)
            .respond(&question(), &trial("t9"))
            .unwrap();
        assert_eq!(first.selected_position, second.selected_position);
        assert_eq!(first.raw_response, second.raw_response);
        assert_eq!(s.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_schedule_repeats_last_entry() {
        let p = RetryPolicy {
            max_attempts: 5,
            backoff_ms: vec![10, 20],
        };
        assert_eq!(p.delay(1), Duration::from_millis(10));
        assert_eq!(p.delay(2), Duration::from_millis(20));
        assert_eq!(p.delay(4), Duration::from_millis(20));
    }

    #[test]
    fn config_validation() {
        let mut c = HttpRespondentConfig::default();
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        let mut c = HttpRespondentConfig::default();
        c.retry.max_attempts = 0;
        assert!(c.validate().is_err());
    }
}
