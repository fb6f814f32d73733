//! Request and response bodies of the backend protocol.

use serde::{Deserialize, Serialize};
use snowball_core::conversation::{Conversation, Part, Role, Turn};
use snowball_core::decoding::SamplingConfig;

/// Header that makes the reference server answer 503, for exercising client retries.
pub const FAULT_HEADER: &str = "x-fault-inject";

/// Significant digits used when writing logits.
pub const LOGIT_DIGITS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub conversation: Conversation,
    #[serde(default)]
    pub generated: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub conversation: Conversation,
    pub sampling: SamplingConfig,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeRequest {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Writes a logits reply with [`LOGIT_DIGITS`] significant digits per value.
///
/// Returns `None` if any value is not finite.
pub fn logits_body(logits: &[f64]) -> Option<String> {
    let mut out = String::with_capacity(16 * logits.len() + 16);
    out.push_str("{\"logits\":[");
    for (i, x) in logits.iter().enumerate() {
        if !x.is_finite() {
            return None;
        }
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_decimal(*x));
    }
    out.push_str("]}");
    Some(out)
}

/// `x` in scientific notation with [`LOGIT_DIGITS`] significant digits.
pub fn format_decimal(x: f64) -> String {
    format!("{:.*e}", LOGIT_DIGITS - 1, x)
}

// Chat-completion shape shared by the curation generator and chat-only model backends.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChatContent {
    Text(String),
    Parts(Vec<Part>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: ChatContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

impl ChatMessage {
    pub fn from_turn(turn: &Turn) -> Self {
        ChatMessage { role: turn.role, content: ChatContent::Parts(turn.parts.clone()) }
    }

    pub fn to_turn(&self) -> Turn {
        let parts = match &self.content {
            ChatContent::Text(t) => vec![Part::Text(t.clone())],
            ChatContent::Parts(p) => p.clone(),
        };
        Turn { role: self.role, parts }
    }

    pub fn text(&self) -> String {
        self.to_turn().text()
    }
}

impl ChatRequest {
    /// A chat request carrying a whole conversation, image parts included.
    pub fn for_conversation(model: &str, conv: &Conversation, sampling: &SamplingConfig, max_tokens: u32) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: conv.turns.iter().map(ChatMessage::from_turn).collect(),
            temperature: if sampling.greedy { 0.0 } else { sampling.temperature },
            max_tokens,
            top_p: Some(sampling.top_p),
            seed: Some(sampling.seed),
        }
    }

    /// Sampling settings implied by the request; temperature 0 means greedy.
    pub fn sampling(&self) -> SamplingConfig {
        let mut s = SamplingConfig::default();
        if self.temperature <= 0.0 {
            s.greedy = true;
        } else {
            s.temperature = self.temperature;
        }
        if let Some(p) = self.top_p {
            s.top_p = p;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    pub fn conversation(&self) -> Result<Conversation, String> {
        Conversation::new(self.messages.iter().map(ChatMessage::to_turn).collect()).map_err(|e| e.to_string())
    }
}
