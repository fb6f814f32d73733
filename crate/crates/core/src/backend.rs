//! The model-backend capability contract shared by in-process and remote backends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::Conversation;
use crate::decoding::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub logits: bool,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub name: String,
    pub vocab_size: usize,
    pub eos_token_id: u32,
    pub capabilities: Capabilities,
}

impl BackendMeta {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.vocab_size == 0 {
            return Err(BackendError::Schema("vocab_size must be positive".into()));
        }
        if self.eos_token_id as usize >= self.vocab_size {
            return Err(BackendError::Schema(format!(
                "eos_token_id {} outside vocabulary of {}",
                self.eos_token_id, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Transient failure; the request may be retried.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("backend lacks {0} capability")]
    Capability(&'static str),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// A model that can score next tokens, complete chats, or both.
///
/// Implementations must be deterministic for identical inputs and safe to call from
/// several threads at once.
pub trait ModelBackend: Send + Sync {
    fn meta(&self) -> &BackendMeta;

    /// Next-token logits for `conversation` followed by the already `generated` token ids.
    fn logits(&self, conversation: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError>;

    fn complete(
        &self,
        conversation: &Conversation,
        sampling: &SamplingConfig,
        max_new_tokens: usize,
    ) -> Result<String, BackendError>;

    /// Text for a run of token ids. End-of-sequence tokens render as nothing.
    fn detokenize(&self, tokens: &[u32]) -> Result<String, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn meta(&self) -> &BackendMeta {
        (**self).meta()
    }
    fn logits(&self, conversation: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError> {
        (**self).logits(conversation, generated)
    }
    fn complete(
        &self,
        conversation: &Conversation,
        sampling: &SamplingConfig,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        (**self).complete(conversation, sampling, max_new_tokens)
    }
    fn detokenize(&self, tokens: &[u32]) -> Result<String, BackendError> {
        (**self).detokenize(tokens)
    }
}
