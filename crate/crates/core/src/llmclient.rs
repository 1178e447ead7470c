//! Chat-completion transport and binary verdict parsing.
//!
//! [`RemoteChat`] speaks the OpenAI-compatible `/chat/completions` protocol.
//! [`MockChat`] is a deterministic test double driven by a [`MockScript`].
//! [`parse_verdict`] turns raw completions into YES / NO / NON_COMPLIANT.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::stable_hash;
use crate::http::{self, Attempt, HttpTransport, RetryPolicy, UreqTransport};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("chat provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("prompt exceeds the provider context window: {0}")]
    ContextOverflow(String),
    #[error("chat provider rejected credentials (status {0})")]
    AuthFailure(u16),
    #[error("mock script exhausted at {0}")]
    ScriptExhausted(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub prompt_text: String,
}

impl ChatRequest {
    /// YES/NO audit request: temperature 0.7, five completion tokens.
    pub fn binary(model_name: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            temperature: crate::DEFAULT_TEMPERATURE,
            max_tokens: crate::BINARY_MAX_TOKENS,
            prompt_text: prompt_text.into(),
        }
    }

    /// Open-ended analysis request; `max_tokens` is capped at 4095.
    pub fn open(model_name: impl Into<String>, prompt_text: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            max_tokens: max_tokens.min(crate::OPEN_MAX_TOKENS),
            ..Self::binary(model_name, prompt_text)
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt_text.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// Wire body for `/chat/completions`.
    pub fn to_wire(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{ "role": "user", "content": self.prompt_text }],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// Completion exactly as returned; never trimmed.
    pub text: String,
    pub latency_ms: u64,
    pub provider_id: String,
}

/// Identifies one model call so seeded providers can derive a per-trial
/// stream independent of execution order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CallKey {
    pub contract_id: String,
    pub trial_index: u32,
    /// 0 for the first call of a trial, 1 for its re-truncation retry.
    pub attempt: u32,
    /// Job seed.
    pub seed: u64,
}

impl CallKey {
    pub fn new(contract_id: impl Into<String>, trial_index: u32, seed: u64) -> Self {
        Self { contract_id: contract_id.into(), trial_index, attempt: 0, seed }
    }
}

pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn complete(&self, request: &ChatRequest, call: &CallKey) -> Result<ChatResponse, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Yes,
    No,
    NonCompliant,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Yes => "YES",
            Decision::No => "NO",
            Decision::NonCompliant => "NON_COMPLIANT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub raw_text: String,
    /// False when the answer was rescued from a longer reply by its leading
    /// word, or was not an answer at all.
    pub compliant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Exact answer, else the leading word.
    #[default]
    Lenient,
    /// Exact answer only.
    Strict,
}

fn strip_answer(s: &str) -> &str {
    s.trim().trim_end_matches(|c: char| matches!(c, '.' | ',' | '!') || c.is_whitespace())
}

fn exact_decision(s: &str) -> Option<Decision> {
    if s.eq_ignore_ascii_case("YES") {
        Some(Decision::Yes)
    } else if s.eq_ignore_ascii_case("NO") {
        Some(Decision::No)
    } else {
        None
    }
}

/// Parses a completion with the default lenient rules.
pub fn parse_verdict(text: &str) -> Verdict {
    parse_verdict_with(text, ParseMode::Lenient)
}

/// Parse rules:
/// 1. trim whitespace and trailing `.`, `,`, `!`; a case-insensitive exact
///    `YES` / `NO` is a compliant answer;
/// 2. (lenient only) otherwise, if the first whitespace-delimited word,
///    stripped of trailing punctuation, is `YES` / `NO`, use it and mark the
///    verdict non-compliant in form;
/// 3. anything else is NON_COMPLIANT.
pub fn parse_verdict_with(text: &str, mode: ParseMode) -> Verdict {
    let stripped = strip_answer(text);
    if let Some(decision) = exact_decision(stripped) {
        return Verdict { decision, raw_text: text.to_string(), compliant: true };
    }
    if mode == ParseMode::Lenient {
        let first = stripped
            .split_whitespace()
            .next()
            .map(|w| w.trim_end_matches(['.', ',', '!', ':', ';']))
            .and_then(exact_decision);
        if let Some(decision) = first {
            return Verdict { decision, raw_text: text.to_string(), compliant: false };
        }
    }
    Verdict { decision: Decision::NonCompliant, raw_text: text.to_string(), compliant: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockScript {
    /// Fixed responses consumed in call order across all contracts.
    Sequence { responses: Vec<String> },
    /// Per-contract response lists indexed by trial index.
    PerContract { responses: BTreeMap<String, Vec<String>> },
    /// "YES" with probability `rate` (per-contract override, else
    /// `default_rate`), "NO" otherwise; drawn from a stream seeded by the
    /// call's `(seed, contract_id, trial_index)`.
    Bernoulli {
        default_rate: f64,
        #[serde(default)]
        rates: BTreeMap<String, f64>,
    },
}

impl MockScript {
    pub fn sequence<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        MockScript::Sequence { responses: responses.into_iter().map(Into::into).collect() }
    }

    pub fn bernoulli(rate: f64) -> Self {
        MockScript::Bernoulli { default_rate: rate, rates: BTreeMap::new() }
    }
}

/// Scripted chat provider. Responses are a pure function of the script and
/// the call key (plus call order, for [`MockScript::Sequence`]).
pub struct MockChat {
    script: MockScript,
    next_call: Mutex<usize>,
}

impl MockChat {
    pub const PROVIDER_ID: &'static str = "mock";

    pub fn new(script: MockScript) -> Self {
        Self { script, next_call: Mutex::new(0) }
    }

    /// Bernoulli draw for one call.
    pub fn bernoulli_yes(call: &CallKey, rate: f64) -> bool {
        let stream = stable_hash(call.seed, &[call.contract_id.as_bytes(), &call.trial_index.to_le_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        rng.random::<f64>() < rate
    }

    fn respond(&self, call: &CallKey) -> Result<String, LlmError> {
        match &self.script {
            MockScript::Sequence { responses } => {
                let mut next = self.next_call.lock();
                let text = responses
                    .get(*next)
                    .cloned()
                    .ok_or_else(|| LlmError::ScriptExhausted(format!("call {}", *next + 1)))?;
                *next += 1;
                Ok(text)
            }
            MockScript::PerContract { responses } => responses
                .get(&call.contract_id)
                .and_then(|r| r.get(call.trial_index as usize))
                .cloned()
                .ok_or_else(|| LlmError::ScriptExhausted(format!("{} trial {}", call.contract_id, call.trial_index))),
            MockScript::Bernoulli { default_rate, rates } => {
                let rate = rates.get(&call.contract_id).copied().unwrap_or(*default_rate);
                Ok(if Self::bernoulli_yes(call, rate) { "YES" } else { "NO" }.to_string())
            }
        }
    }
}

impl ChatProvider for MockChat {
    fn provider_id(&self) -> &str {
        Self::PROVIDER_ID
    }

    fn complete(&self, request: &ChatRequest, call: &CallKey) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let start = Instant::now();
        let text = self.respond(call)?;
        Ok(ChatResponse { text, latency_ms: start.elapsed().as_millis() as u64, provider_id: Self::PROVIDER_ID.into() })
    }
}

/// Caps concurrent calls and spaces call starts to a requests-per-minute rate.
pub struct Throttle {
    max_concurrent: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    min_interval: Duration,
    next_start: Mutex<Instant>,
}

impl Throttle {
    /// `max_concurrent == 0` or `requests_per_minute == 0` disables that limit.
    pub fn new(max_concurrent: usize, requests_per_minute: u32) -> Self {
        let min_interval = if requests_per_minute == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(60.0 / f64::from(requests_per_minute))
        };
        Self {
            max_concurrent,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            min_interval,
            next_start: Mutex::new(Instant::now()),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(0, 0)
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        if self.max_concurrent > 0 {
            let mut n = self.in_flight.lock();
            while *n >= self.max_concurrent {
                self.freed.wait(&mut n);
            }
            *n += 1;
        }
        if !self.min_interval.is_zero() {
            let wait = {
                let mut next = self.next_start.lock();
                let now = Instant::now();
                let start = (*next).max(now);
                *next = start + self.min_interval;
                start - now
            };
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        let out = f();
        if self.max_concurrent > 0 {
            *self.in_flight.lock() -= 1;
            self.freed.notify_one();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    pub provider_id: String,
    /// Full URL; defaults to `<RAGAUDIT_BASE_URL>/chat/completions`.
    pub endpoint_url: Option<String>,
    pub timeout_secs: u64,
    pub retry: u32,
    pub retry_base_delay_ms: u64,
    pub max_concurrent: usize,
    pub requests_per_minute: u32,
}

impl Default for ChatEndpointConfig {
    fn default() -> Self {
        Self {
            provider_id: "openai:gpt-4-1106-preview".into(),
            endpoint_url: None,
            timeout_secs: 120,
            retry: 2,
            retry_base_delay_ms: 1000,
            max_concurrent: 8,
            requests_per_minute: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: Option<String>,
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded") || lower.contains("maximum context length")
}

/// OpenAI-compatible chat client.
pub struct RemoteChat {
    config: ChatEndpointConfig,
    url: String,
    api_key: Option<String>,
    transport: Box<dyn HttpTransport>,
    throttle: Throttle,
}

impl RemoteChat {
    pub fn from_env(config: ChatEndpointConfig) -> Self {
        let url = config
            .endpoint_url
            .clone()
            .unwrap_or_else(|| format!("{}/chat/completions", http::resolve_base_url(None)));
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_secs.max(1))));
        Self::with_transport(config, url, http::api_key_from_env(), transport)
    }

    pub fn with_transport(
        config: ChatEndpointConfig,
        url: impl Into<String>,
        api_key: Option<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        let throttle = Throttle::new(config.max_concurrent, config.requests_per_minute);
        Self { config, url: url.into(), api_key, transport, throttle }
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { retries: self.config.retry, base_delay: Duration::from_millis(self.config.retry_base_delay_ms) }
    }
}

impl ChatProvider for RemoteChat {
    fn provider_id(&self) -> &str {
        &self.config.provider_id
    }

    fn complete(&self, request: &ChatRequest, _call: &CallKey) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = request.to_wire();
        let start = Instant::now();
        let text = self.retry_policy().run(|_| {
            let reply = match self.throttle.run(|| self.transport.post_json(&self.url, self.api_key.as_deref(), &body)) {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(LlmError::ProviderUnavailable(e.0)),
            };
            match reply.status {
                s if (200..300).contains(&s) => match serde_json::from_str::<WireReply>(&reply.body) {
                    Ok(w) => match w.choices.into_iter().next() {
                        Some(choice) => Attempt::Done(choice.message.content.unwrap_or_default()),
                        None => Attempt::Fatal(LlmError::MalformedResponse("no choices".into())),
                    },
                    Err(e) => Attempt::Fatal(LlmError::MalformedResponse(e.to_string())),
                },
                401 | 403 => Attempt::Fatal(LlmError::AuthFailure(reply.status)),
                400 | 413 if is_context_overflow(&reply.body) || reply.status == 413 => {
                    Attempt::Fatal(LlmError::ContextOverflow(reply.body))
                }
                429 | 500..=599 => Attempt::Retry(LlmError::ProviderUnavailable(format!("status {}", reply.status))),
                s => Attempt::Fatal(LlmError::ProviderUnavailable(format!("status {s}: {}", reply.body))),
            }
        })?;
        Ok(ChatResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            provider_id: self.config.provider_id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn req() -> ChatRequest {
        ChatRequest::binary("gpt-4-1106-preview", "Is it vulnerable?")
    }

    #[test]
    fn binary_and_open_modes() {
        let r = req();
        assert_eq!((r.temperature, r.max_tokens), (0.7, 5));
        assert_eq!(ChatRequest::open("m", "p", 4095).max_tokens, 4095);
        assert_eq!(ChatRequest::open("m", "p", 100_000).max_tokens, 4095);
        let wire = r.to_wire();
        assert_eq!(wire["messages"][0]["role"], "user");
        assert_eq!(wire["max_tokens"], 5);
    }

    #[test]
    fn parse_basic_cases() {
        assert_eq!(parse_verdict("YES").decision, Decision::Yes);
        assert!(parse_verdict("YES").compliant);
        assert_eq!(parse_verdict("no.").decision, Decision::No);
        let v = parse_verdict("The contract appears safe because...");
        assert_eq!(v.decision, Decision::NonCompliant);
        assert_eq!(v.raw_text, "The contract appears safe because...");
        let v = parse_verdict("YES, because the call precedes the update");
        assert_eq!((v.decision, v.compliant), (Decision::Yes, false));
        assert_eq!(parse_verdict_with("YES, because", ParseMode::Strict).decision, Decision::NonCompliant);
    }

    #[test]
    fn sequence_script() {
        let m = MockChat::new(MockScript::sequence(["YES", "NO"]));
        let k = CallKey::new("a.sol", 0, 0);
        assert_eq!(m.complete(&req(), &k).unwrap().text, "YES");
        assert_eq!(m.complete(&req(), &k).unwrap().text, "NO");
        assert!(matches!(m.complete(&req(), &k), Err(LlmError::ScriptExhausted(_))));
    }

    #[test]
    fn bernoulli_boundaries_and_rerun() {
        let always = MockChat::new(MockScript::bernoulli(1.0));
        let never = MockChat::new(MockScript::bernoulli(0.0));
        for i in 0..200 {
            let k = CallKey::new("c.sol", i, 5);
            assert_eq!(always.complete(&req(), &k).unwrap().text, "YES");
            assert_eq!(never.complete(&req(), &k).unwrap().text, "NO");
        }
        let run = || {
            let m = MockChat::new(MockScript::bernoulli(0.5));
            (0..1000).map(|i| m.complete(&req(), &CallKey::new("c.sol", i, 42)).unwrap().text).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let yes = a.iter().filter(|t| *t == "YES").count();
        assert!((400..600).contains(&yes), "{yes}");
    }

    #[test]
    fn per_contract_script() {
        let mut responses = BTreeMap::new();
        responses.insert("a.sol".to_string(), vec!["YES".to_string(), "NO".to_string()]);
        let m = MockChat::new(MockScript::PerContract { responses });
        assert_eq!(m.complete(&req(), &CallKey::new("a.sol", 1, 0)).unwrap().text, "NO");
        assert!(matches!(m.complete(&req(), &CallKey::new("a.sol", 2, 0)), Err(LlmError::ScriptExhausted(_))));
        assert!(matches!(m.complete(&req(), &CallKey::new("b.sol", 0, 0)), Err(LlmError::ScriptExhausted(_))));
    }

    #[test]
    fn script_json_shape() {
        let s: MockScript = serde_json::from_str(r#"{"kind": "bernoulli", "default_rate": 0.6071}"#).unwrap();
        assert_eq!(s, MockScript::bernoulli(0.6071));
    }

    struct Scripted(Mutex<Vec<http::HttpReply>>, Mutex<Vec<serde_json::Value>>);

    impl HttpTransport for Scripted {
        fn post_json(
            &self,
            _url: &str,
            bearer: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<http::HttpReply, http::TransportError> {
            assert_eq!(bearer, Some("secret"));
            self.1.lock().push(body.clone());
            let mut q = self.0.lock();
            if q.is_empty() {
                return Err(http::TransportError("connection refused".into()));
            }
            Ok(q.remove(0))
        }
    }

    fn remote(replies: Vec<(u16, &str)>) -> (RemoteChat, Arc<Scripted>) {
        let replies = replies.into_iter().map(|(status, b)| http::HttpReply { status, body: b.into() }).collect();
        let t = Arc::new(Scripted(Mutex::new(replies), Mutex::new(Vec::new())));
        let cfg = ChatEndpointConfig { retry_base_delay_ms: 0, ..Default::default() };
        (RemoteChat::with_transport(cfg, "http://fake", Some("secret".into()), Box::new(t.clone())), t)
    }

    #[test]
    fn remote_returns_text_verbatim() {
        let (c, t) = remote(vec![(200, r#"{"choices":[{"message":{"role":"assistant","content":" Yes.\n"}}]}"#)]);
        let r = c.complete(&req(), &CallKey::new("a", 0, 0)).unwrap();
        assert_eq!(r.text, " Yes.\n");
        assert_eq!(t.1.lock()[0]["temperature"], 0.7);
    }

    #[test]
    fn remote_error_mapping() {
        let k = CallKey::new("a", 0, 0);
        let (c, _) = remote(vec![(401, "no")]);
        assert_eq!(c.complete(&req(), &k), Err(LlmError::AuthFailure(401)));
        let (c, _) = remote(vec![(400, r#"{"error":{"code":"context_length_exceeded"}}"#)]);
        assert!(matches!(c.complete(&req(), &k), Err(LlmError::ContextOverflow(_))));
        let (c, t) = remote(vec![(503, ""), (429, ""), (503, "")]);
        assert!(matches!(c.complete(&req(), &k), Err(LlmError::ProviderUnavailable(_))));
        assert_eq!(t.1.lock().len(), 3);
        let (c, _) = remote(vec![(500, ""), (200, r#"{"choices":[{"message":{"content":"NO"}}]}"#)]);
        assert_eq!(c.complete(&req(), &k).unwrap().text, "NO");
    }

    #[test]
    fn throttle_caps_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let throttle = Arc::new(Throttle::new(2, 0));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (throttle, live, peak) = (throttle.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    throttle.run(|| {
                        let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(n, Ordering::SeqCst);
                        std::thread::sleep(Duration::from_millis(5));
                        live.fetch_sub(1, Ordering::SeqCst);
                    })
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
