//! HTTP transport for model backends and curation generators, plus the protocol
//! conformance suite.

pub mod chat;
pub mod conformance;
mod http;
pub mod remote;
pub mod server;
pub mod wire;

pub use chat::{generator_chat_handler, model_chat_handler, serve_chat, RemoteGenerator, CHAT_PATH};
pub use conformance::{run_conformance, CheckResult, ConformanceReport, ConformanceTarget};
pub use remote::{chat_only_backend, ChatOnlyBackend, ClientOptions, RemoteBackend};
pub use server::{serve, ServerHandle};
