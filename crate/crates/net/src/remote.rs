//! Clients for remote model backends: the full protocol and chat-only endpoints.

use std::time::Duration;

use serde::de::DeserializeOwned;
use snowball_core::backend::{BackendError, BackendMeta, Capabilities, ModelBackend};
use snowball_core::conversation::Conversation;
use snowball_core::decoding::SamplingConfig;
use snowball_core::generator::RetryPolicy;

use crate::http::{error_text, Http, Reply, DEFAULT_TIMEOUT};
use crate::wire::*;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions { retry: RetryPolicy::default(), timeout: DEFAULT_TIMEOUT, max_in_flight: 16 }
    }
}

fn status_error(status: u16, body: &str, capability: &'static str) -> BackendError {
    let msg = error_text(body);
    match status {
        400 => BackendError::BadRequest(msg),
        422 => BackendError::Capability(capability),
        502..=504 => BackendError::Unavailable(format!("HTTP {status}: {msg}")),
        _ => BackendError::Other(format!("HTTP {status}: {msg}")),
    }
}

fn exhausted((reply, attempts): (Reply, u32)) -> BackendError {
    BackendError::Unavailable(format!("{} (after {attempts} attempts)", reply.describe()))
}

fn decode<T: DeserializeOwned>(body: &str) -> Result<T, BackendError> {
    serde_json::from_str(body).map_err(|e| BackendError::Schema(format!("malformed reply: {e}")))
}

/// A model served over the backend protocol.
pub struct RemoteBackend {
    base: String,
    http: Http,
    meta: BackendMeta,
}

impl RemoteBackend {
    pub fn connect(base_url: &str) -> Result<Self, BackendError> {
        Self::with_options(base_url, ClientOptions::default())
    }

    /// Fetches and validates the server's meta.
    pub fn with_options(base_url: &str, opts: ClientOptions) -> Result<Self, BackendError> {
        let base = base_url.trim_end_matches('/').to_string();
        let http = Http::new(opts.retry, opts.timeout, opts.max_in_flight, None);
        let (status, body) = http.send(&format!("{base}/v1/meta"), None).map_err(exhausted)?;
        if status != 200 {
            return Err(status_error(status, &body, "meta"));
        }
        let meta: BackendMeta = decode(&body)?;
        meta.validate()?;
        Ok(RemoteBackend { base, http, meta })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &str, capability: &'static str) -> Result<T, BackendError> {
        let (status, reply) = self.http.send(&format!("{}{path}", self.base), Some(body)).map_err(exhausted)?;
        if status != 200 {
            return Err(status_error(status, &reply, capability));
        }
        decode(&reply)
    }
}

impl ModelBackend for RemoteBackend {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn logits(&self, conversation: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError> {
        if !self.meta.capabilities.logits {
            return Err(BackendError::Capability("logits"));
        }
        let req = LogitsRequest { conversation: conversation.clone(), generated: generated.to_vec() };
        let body = serde_json::to_string(&req).map_err(|e| BackendError::Other(e.to_string()))?;
        let reply: LogitsResponse = self.post("/v1/logits", &body, "logits")?;
        if reply.logits.len() != self.meta.vocab_size {
            return Err(BackendError::Schema(format!(
                "logits reply has {} values but vocab_size is {}",
                reply.logits.len(),
                self.meta.vocab_size
            )));
        }
        if let Some(i) = reply.logits.iter().position(|x| !x.is_finite()) {
            return Err(BackendError::Schema(format!("non-finite logit at index {i}")));
        }
        Ok(reply.logits)
    }

    fn complete(
        &self,
        conversation: &Conversation,
        sampling: &SamplingConfig,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        if !self.meta.capabilities.complete {
            return Err(BackendError::Capability("complete"));
        }
        let req = CompleteRequest { conversation: conversation.clone(), sampling: *sampling, max_new_tokens };
        let body = serde_json::to_string(&req).map_err(|e| BackendError::Other(e.to_string()))?;
        let reply: CompleteResponse = self.post("/v1/complete", &body, "complete")?;
        Ok(reply.text)
    }

    fn detokenize(&self, tokens: &[u32]) -> Result<String, BackendError> {
        let body = serde_json::to_string(&DetokenizeRequest { tokens: tokens.to_vec() })
            .map_err(|e| BackendError::Other(e.to_string()))?;
        let reply: DetokenizeResponse = self.post("/v1/detokenize", &body, "detokenize")?;
        Ok(reply.text)
    }
}

/// A black-box chat model: completions only, authenticated with a bearer token.
pub struct ChatOnlyBackend {
    url: String,
    model: String,
    http: Http,
    meta: BackendMeta,
}

/// Reads the bearer token from `auth_env_var` and builds a chat-only backend posting to
/// `url`. The endpoint is not contacted until the first completion.
pub fn chat_only_backend(url: &str, auth_env_var: &str, model: &str) -> Result<ChatOnlyBackend, BackendError> {
    ChatOnlyBackend::new(url, auth_env_var, model, ClientOptions::default())
}

impl ChatOnlyBackend {
    pub fn new(url: &str, auth_env_var: &str, model: &str, opts: ClientOptions) -> Result<Self, BackendError> {
        let token = std::env::var(auth_env_var)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| BackendError::Config(format!("environment variable {auth_env_var} is not set")))?;
        Ok(ChatOnlyBackend {
            url: url.to_string(),
            model: model.to_string(),
            http: Http::new(opts.retry, opts.timeout, opts.max_in_flight, Some(token)),
            meta: BackendMeta {
                name: model.to_string(),
                // a placeholder single-token vocabulary; logits are never served
                vocab_size: 1,
                eos_token_id: 0,
                capabilities: Capabilities { logits: false, complete: true },
            },
        })
    }
}

impl ModelBackend for ChatOnlyBackend {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn logits(&self, _: &Conversation, _: &[u32]) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Capability("logits"))
    }

    fn complete(
        &self,
        conversation: &Conversation,
        sampling: &SamplingConfig,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        let max_tokens = u32::try_from(max_new_tokens).unwrap_or(u32::MAX);
        let req = ChatRequest::for_conversation(&self.model, conversation, sampling, max_tokens);
        let body = serde_json::to_string(&req).map_err(|e| BackendError::Other(e.to_string()))?;
        let (status, reply) = self.http.send(&self.url, Some(&body)).map_err(exhausted)?;
        if status != 200 {
            return Err(status_error(status, &reply, "complete"));
        }
        let reply: ChatResponse = decode(&reply)?;
        Ok(reply.content)
    }

    fn detokenize(&self, _: &[u32]) -> Result<String, BackendError> {
        Err(BackendError::Capability("detokenize"))
    }
}
