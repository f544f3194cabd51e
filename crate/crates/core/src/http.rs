//! Blocking JSON-over-HTTP client used by the remote composer and the
//! simulator endpoints: per-call timeout, bounded retries with exponential
//! backoff, and a cap on concurrent in-flight requests.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout_secs: 30.0,
            max_retries: 2,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    available: Mutex<usize>,
    cond: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cond.notify_one();
    }
}

/// Bearer token sent to model endpoints when set.
pub const ENDPOINT_TOKEN_ENV: &str = "CIRLOOP_ENDPOINT_TOKEN";

#[derive(Debug)]
pub struct JsonClient {
    agent: ureq::Agent,
    policy: RetryPolicy,
    permits: Permits,
    bearer: Option<String>,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy, max_in_flight: usize) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(policy.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            policy,
            permits: Permits::new(max_in_flight),
            bearer: std::env::var(ENDPOINT_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> Self {
        self.bearer = token;
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    /// POSTs `body` and decodes the JSON response, retrying transport errors,
    /// 429 and 5xx responses. Other 4xx responses fail immediately.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R> {
        let _permit = self.permits.acquire();
        let mut attempt = 0;
        loop {
            match self.post_once(url, body) {
                Ok(r) => return Ok(r),
                Err((err, retryable)) => {
                    if !retryable || attempt >= self.policy.max_retries {
                        return Err(err);
                    }
                    log::debug!("retrying {url} after error: {err}");
                    std::thread::sleep(self.policy.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
    ) -> std::result::Result<R, (Error, bool)> {
        let transport = |message: String| Error::Transport {
            endpoint: url.to_string(),
            message,
        };
        let mut req = self.agent.post(url);
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| (transport(e.to_string()), true))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((transport(format!("HTTP {status}")), true));
        }
        if status >= 400 {
            return Err((transport(format!("HTTP {status}")), false));
        }
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| (transport(format!("bad response body: {e}")), false))
    }
}

/// Joins a base URL and a path without doubling slashes.
pub fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy {
            initial_backoff_ms: 100,
            max_backoff_ms: 500,
            ..RetryPolicy::default()
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(400));
        assert_eq!(p.backoff(3), Duration::from_millis(500));
    }

    #[test]
    fn defaults() {
        let p = RetryPolicy::default();
        assert_eq!(p.timeout_secs, 30.0);
        assert_eq!(p.max_retries, 2);
    }

    #[test]
    fn join() {
        assert_eq!(join_url("http://h:1/", "/compose"), "http://h:1/compose");
        assert_eq!(join_url("http://h:1", "compose"), "http://h:1/compose");
    }
}
