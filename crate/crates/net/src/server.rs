//! HTTP server exposing any [`ModelBackend`] over the backend protocol.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use snowball_core::backend::{BackendError, ModelBackend};
use snowball_core::conversation::Conversation;
use tokio::sync::oneshot;

use crate::wire::*;

/// A server running on its own thread. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        let _keep = self.shutdown.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` synchronously (a busy port fails here) and serves `router` on a
/// background runtime.
pub fn spawn_router(router: Router, addr: SocketAddr) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(format!("serve-{}", addr.port())).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("listener: {e}");
                    return;
                }
            };
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
                log::error!("server: {e}");
            }
        });
    })?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves `backend` on `addr` (port 0 picks a free port).
pub fn serve(backend: Arc<dyn ModelBackend>, addr: SocketAddr) -> io::Result<ServerHandle> {
    spawn_router(router(backend), addr)
}

pub fn router(backend: Arc<dyn ModelBackend>) -> Router {
    Router::new()
        .route("/v1/meta", get(meta))
        .route("/v1/logits", post(logits))
        .route("/v1/complete", post(complete))
        .route("/v1/detokenize", post(detokenize))
        .with_state(backend)
}

type Backend = Arc<dyn ModelBackend>;

pub(crate) fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

pub(crate) fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    let body = serde_json::to_string(&ErrorBody { error: msg.into() }).expect("error body serializes");
    json_response(status, body)
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    match serde_json::to_string(value) {
        Ok(s) => json_response(StatusCode::OK, s),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn backend_error(e: BackendError) -> Response {
    let status = match &e {
        BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        BackendError::Capability(_) => StatusCode::UNPROCESSABLE_ENTITY,
        BackendError::BadRequest(_) | BackendError::Schema(_) => StatusCode::BAD_REQUEST,
        BackendError::Config(_) | BackendError::Other(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, e.to_string())
}

pub(crate) fn fault_injected(headers: &HeaderMap) -> Option<Response> {
    let v = headers.get(FAULT_HEADER)?;
    (v.as_bytes() == b"unavailable").then(|| error_response(StatusCode::SERVICE_UNAVAILABLE, "injected fault"))
}

pub(crate) fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error_response(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

fn check_context(conv: &Conversation) -> Result<(), Response> {
    conv.validate().map_err(|e| error_response(StatusCode::BAD_REQUEST, e.to_string()))?;
    if conv.query().is_none() {
        return Err(error_response(StatusCode::BAD_REQUEST, "conversation must end with a user turn"));
    }
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn meta(State(backend): State<Backend>, headers: HeaderMap) -> Response {
    if let Some(r) = fault_injected(&headers) {
        return r;
    }
    ok_json(backend.meta())
}

async fn logits(State(backend): State<Backend>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(r) = fault_injected(&headers) {
        return r;
    }
    let req: LogitsRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if let Err(r) = check_context(&req.conversation) {
        return r;
    }
    if !backend.meta().capabilities.logits {
        return backend_error(BackendError::Capability("logits"));
    }
    let vocab = backend.meta().vocab_size;
    if let Some(bad) = req.generated.iter().find(|&&t| t as usize >= vocab) {
        return error_response(StatusCode::BAD_REQUEST, format!("token id {bad} outside vocabulary of {vocab}"));
    }
    let result = blocking(move || backend.logits(&req.conversation, &req.generated)).await;
    match result {
        Ok(Ok(values)) => match logits_body(&values) {
            Some(body) => json_response(StatusCode::OK, body),
            None => error_response(StatusCode::INTERNAL_SERVER_ERROR, "backend produced non-finite logits"),
        },
        Ok(Err(e)) => backend_error(e),
        Err(r) => r,
    }
}

async fn complete(State(backend): State<Backend>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(r) = fault_injected(&headers) {
        return r;
    }
    let req: CompleteRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if let Err(r) = check_context(&req.conversation) {
        return r;
    }
    if let Err(e) = req.sampling.validate() {
        return error_response(StatusCode::BAD_REQUEST, e.to_string());
    }
    if !backend.meta().capabilities.complete {
        return backend_error(BackendError::Capability("complete"));
    }
    let result = blocking(move || backend.complete(&req.conversation, &req.sampling, req.max_new_tokens)).await;
    match result {
        Ok(Ok(text)) => ok_json(&CompleteResponse { text }),
        Ok(Err(e)) => backend_error(e),
        Err(r) => r,
    }
}

async fn detokenize(State(backend): State<Backend>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(r) = fault_injected(&headers) {
        return r;
    }
    let req: DetokenizeRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    match backend.detokenize(&req.tokens) {
        Ok(text) => ok_json(&DetokenizeResponse { text }),
        Err(e) => backend_error(e),
    }
}
