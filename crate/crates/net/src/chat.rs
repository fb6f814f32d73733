//! Chat-completion endpoints: a remote curation generator client and a small server
//! that answers chat requests from a model backend or a generator.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::Response;
use axum::routing::post;
use axum::Router;
use snowball_core::backend::{BackendError, ModelBackend};
use snowball_core::generator::{GenBackend, GenError, GenRequest, RetryPolicy};

use crate::http::{error_text, Http};
use crate::remote::ClientOptions;
use crate::server::{error_response, fault_injected, json_response, parse, spawn_router, ServerHandle};
use crate::wire::*;

/// Path the chat server answers on.
pub const CHAT_PATH: &str = "/v1/chat";

/// Curation generator behind a chat-completion endpoint.
pub struct RemoteGenerator {
    url: String,
    model: String,
    http: Http,
}

impl RemoteGenerator {
    /// `auth_env_var`, when given, must name a set environment variable holding the
    /// bearer token.
    pub fn new(url: &str, model: &str, auth_env_var: Option<&str>) -> Result<Self, GenError> {
        Self::with_options(url, model, auth_env_var, ClientOptions::default())
    }

    pub fn with_options(
        url: &str,
        model: &str,
        auth_env_var: Option<&str>,
        opts: ClientOptions,
    ) -> Result<Self, GenError> {
        let token = match auth_env_var {
            Some(var) => Some(
                std::env::var(var)
                    .ok()
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| GenError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(RemoteGenerator {
            url: url.to_string(),
            model: model.to_string(),
            http: Http::new(opts.retry, opts.timeout, opts.max_in_flight, token),
        })
    }

    pub fn retry(&self) -> RetryPolicy {
        self.http.retry
    }
}

impl GenBackend for RemoteGenerator {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &GenRequest) -> Result<String, GenError> {
        if req.prompt.trim().is_empty() {
            return Err(GenError::EmptyPrompt);
        }
        let chat = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage {
                role: snowball_core::conversation::Role::User,
                content: ChatContent::Text(req.prompt.clone()),
            }],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            top_p: None,
            seed: None,
        };
        let body = serde_json::to_string(&chat).map_err(|e| GenError::Config(e.to_string()))?;
        let (status, reply) = self
            .http
            .send(&self.url, Some(&body))
            .map_err(|(r, attempts)| GenError::Unavailable { attempts, last: r.describe() })?;
        match status {
            200 => serde_json::from_str::<ChatResponse>(&reply)
                .map(|r| r.content)
                .map_err(|e| GenError::Malformed(e.to_string())),
            400..=499 => Err(GenError::Rejected(format!("HTTP {status}: {}", error_text(&reply)))),
            _ => Err(GenError::Malformed(format!("HTTP {status}: {}", error_text(&reply)))),
        }
    }
}

/// Answers one chat request.
pub type ChatHandler = Arc<dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync>;

/// Chat answers from a model backend's completion.
pub fn model_chat_handler(backend: Arc<dyn ModelBackend>) -> ChatHandler {
    Arc::new(move |req: &ChatRequest| {
        let conv = req.conversation().map_err(BackendError::BadRequest)?;
        let sampling = req.sampling();
        sampling.validate().map_err(|e| BackendError::BadRequest(e.to_string()))?;
        backend.complete(&conv, &sampling, req.max_tokens as usize)
    })
}

/// Chat answers from a curation generator, prompted with the last message's text.
pub fn generator_chat_handler(generator: Arc<dyn GenBackend>) -> ChatHandler {
    Arc::new(move |req: &ChatRequest| {
        let prompt = req.messages.last().map(ChatMessage::text).unwrap_or_default();
        let gen_req = GenRequest { prompt, max_tokens: req.max_tokens, temperature: req.temperature };
        generator.complete(&gen_req).map_err(|e| match e {
            GenError::Transient(m) | GenError::Unavailable { last: m, .. } => BackendError::Unavailable(m),
            other => BackendError::BadRequest(other.to_string()),
        })
    })
}

#[derive(Clone)]
struct ChatState {
    handler: ChatHandler,
    token: Option<String>,
}

/// Serves `handler` on [`CHAT_PATH`]. With `token`, requests must carry it as a bearer
/// token.
pub fn serve_chat(handler: ChatHandler, token: Option<String>, addr: SocketAddr) -> io::Result<ServerHandle> {
    let router = Router::new().route(CHAT_PATH, post(chat)).with_state(ChatState { handler, token });
    spawn_router(router, addr)
}

async fn chat(State(state): State<ChatState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(r) = fault_injected(&headers) {
        return r;
    }
    if let Some(token) = &state.token {
        let expected = format!("Bearer {token}");
        if headers.get(header::AUTHORIZATION).map(|v| v.as_bytes()) != Some(expected.as_bytes()) {
            return error_response(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    let req: ChatRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let handler = state.handler.clone();
    let result = tokio::task::spawn_blocking(move || handler(&req)).await;
    match result {
        Ok(Ok(content)) => match serde_json::to_string(&ChatResponse { content }) {
            Ok(s) => json_response(StatusCode::OK, s),
            Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        },
        Ok(Err(BackendError::Unavailable(m))) => error_response(StatusCode::SERVICE_UNAVAILABLE, m),
        Ok(Err(BackendError::Capability(c))) => {
            error_response(StatusCode::UNPROCESSABLE_ENTITY, BackendError::Capability(c).to_string())
        }
        Ok(Err(BackendError::BadRequest(m))) => error_response(StatusCode::BAD_REQUEST, m),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
