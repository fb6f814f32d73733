//! The curation generator: an instruction-following text model behind a small trait,
//! plus a scripted mock keyed by prompt fingerprints.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenRequest {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("unscripted prompt (fingerprint {0})")]
    Unscripted(String),
    /// A transient failure worth retrying (network error, HTTP 5xx).
    #[error("generator temporarily unavailable: {0}")]
    Transient(String),
    /// Retries were exhausted; the backend is considered down.
    #[error("generator unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("generator rejected request: {0}")]
    Rejected(String),
    #[error("malformed generator response: {0}")]
    Malformed(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// An instruction-following text generator. Implementations must tolerate concurrent calls.
pub trait GenBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &GenRequest) -> Result<String, GenError>;
}

/// Trim and collapse whitespace runs to a single space.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn fingerprint(prompt: &str) -> String {
    sha256_hex(normalize_prompt(prompt).as_bytes())
}

/// Deterministic generator replaying responses from a fingerprint-to-response script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptedMock {
    script: BTreeMap<String, String>,
}

impl ScriptedMock {
    pub fn new(script: BTreeMap<String, String>) -> Self {
        ScriptedMock { script }
    }

    /// Scripts `response` for `prompt` (fingerprinted here).
    pub fn on(&mut self, prompt: &str, response: impl Into<String>) -> &mut Self {
        self.script.insert(fingerprint(prompt), response.into());
        self
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

impl GenBackend for ScriptedMock {
    fn name(&self) -> &str {
        "scripted-mock"
    }

    fn complete(&self, req: &GenRequest) -> Result<String, GenError> {
        if req.prompt.trim().is_empty() {
            return Err(GenError::EmptyPrompt);
        }
        let fp = fingerprint(&req.prompt);
        self.script
            .get(&fp)
            .cloned()
            .ok_or(GenError::Unscripted(fp))
    }
}

/// Exponential backoff: `attempts` tries, sleeping `base * 2^k` after the k-th failure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, failure: u32) -> Duration {
        self.base * 2u32.saturating_pow(failure)
    }

    /// Runs `op` until it succeeds, fails non-retryably, or attempts run out.
    /// Returns the last retryable error together with the number of attempts made.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut() -> Result<T, E>,
        retryable: impl Fn(&E) -> bool,
    ) -> Result<T, (E, u32)> {
        let attempts = self.attempts.max(1);
        let mut n = 0;
        loop {
            n += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if retryable(&e) && n < attempts => {
                    thread::sleep(self.delay(n - 1));
                }
                Err(e) => return Err((e, n)),
            }
        }
    }
}
