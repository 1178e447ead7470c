//! Minimal JSON-over-HTTP transport shared by the remote embedding and chat
//! providers, plus the retry policy they both use.

use std::thread;
use std::time::Duration;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "RAGAUDIT_API_KEY";
/// Environment variable overriding the provider base URL.
pub const BASE_URL_ENV: &str = "RAGAUDIT_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

impl HttpReply {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// Posts a JSON body and returns the raw reply. Non-2xx statuses are replies,
/// not errors; only connection-level failures are `Err`.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value) -> Result<HttpReply, TransportError>;
}

impl<T: HttpTransport + ?Sized> HttpTransport for std::sync::Arc<T> {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value) -> Result<HttpReply, TransportError> {
        (**self).post_json(url, bearer, body)
    }
}

/// Blocking transport backed by `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| TransportError(e.to_string()))?;
        let mut resp = req.send(&payload[..]).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Resolves the base URL: explicit value, then `RAGAUDIT_BASE_URL`, then the
/// public default. Trailing slashes are dropped.
pub fn resolve_base_url(explicit: Option<&str>) -> String {
    let base = explicit
        .map(str::to_string)
        .or_else(|| std::env::var(BASE_URL_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
    base.trim_end_matches('/').to_string()
}

pub fn api_key_from_env() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty())
}

/// Outcome of one attempt inside [`RetryPolicy::run`].
pub enum Attempt<T, E> {
    Done(T),
    /// Worth retrying (network error, 429, 5xx).
    Retry(E),
    /// Not worth retrying (auth, bad request, schema errors).
    Fatal(E),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn no_delay(retries: u32) -> Self {
        Self { retries, base_delay: Duration::ZERO }
    }

    /// Delay before retry number `n` (0-based): `base * 2^n`.
    pub fn delay(&self, n: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << n.min(16))
    }

    /// Runs `op` until it succeeds, fails fatally, or retries are exhausted.
    /// Returns the last error on exhaustion.
    pub fn run<T, E>(&self, mut op: impl FnMut(u32) -> Attempt<T, E>) -> Result<T, E> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempt >= self.retries {
                        return Err(e);
                    }
                    let wait = self.delay(attempt);
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_delays() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_secs(1));
        assert_eq!(p.delay(1), Duration::from_secs(2));
        assert_eq!(p.delay(2), Duration::from_secs(4));
    }

    #[test]
    fn retries_then_gives_up() {
        let mut calls = 0;
        let r: Result<(), &str> = RetryPolicy::no_delay(2).run(|_| {
            calls += 1;
            Attempt::Retry("down")
        });
        assert_eq!(r, Err("down"));
        assert_eq!(calls, 3);
    }

    #[test]
    fn fatal_stops_immediately() {
        let mut calls = 0;
        let r: Result<(), &str> = RetryPolicy::no_delay(5).run(|_| {
            calls += 1;
            Attempt::Fatal("auth")
        });
        assert_eq!(r, Err("auth"));
        assert_eq!(calls, 1);
    }

    #[test]
    fn succeeds_after_transient_failure() {
        let r: Result<u32, &str> =
            RetryPolicy::no_delay(3).run(|n| if n < 2 { Attempt::Retry("flaky") } else { Attempt::Done(n) });
        assert_eq!(r, Ok(2));
    }
}
