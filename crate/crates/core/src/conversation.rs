//! Conversations and the four evaluation settings built from a sample.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::stable_u64;
use crate::record::SampleRecord;

/// Appended to the question in the formatting-prompt mode.
pub const FORMATTING_SENTENCE: &str = "Please answer the question using a single word or phrase.";

/// First-round user request in settings that carry an image description.
pub const DESCRIBE_REQUEST: &str = "Describe this image in detail.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One piece of a turn. Serializes as `{"type": "text"|"image", "value": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Part {
    Text(String),
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    #[serde(rename = "content")]
    pub parts: Vec<Part>,
}

impl Turn {
    pub fn user(parts: Vec<Part>) -> Self {
        Turn { role: Role::User, parts }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            parts: vec![Part::Text(text.into())],
        }
    }

    /// Text parts joined by a single newline.
    pub fn text(&self) -> String {
        let texts: Vec<&str> = self
            .parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    pub fn image(&self) -> Option<&str> {
        self.parts.iter().find_map(|p| match p {
            Part::Image(r) => Some(r.as_str()),
            Part::Text(_) => None,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConversationError {
    #[error("conversation is empty")]
    Empty,
    #[error("turn {0} breaks user/assistant alternation")]
    Alternation(usize),
    #[error("conversation must end with a user turn")]
    EndsWithAssistant,
    #[error("at most one image is allowed and it must be in the first user turn")]
    ImagePlacement,
    #[error("sample `{0}` is not verified; hallucinatory settings need verified samples")]
    Unverified(String),
    #[error("sample `{id}` has no {what} for the requested setting")]
    MissingContent { id: String, what: &'static str },
    #[error("sample `{0}` has an empty question")]
    EmptyQuestion(String),
}

/// An ordered, alternating list of turns starting with the user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Builds a conversation, enforcing the alternation and image-placement invariants.
    pub fn new(turns: Vec<Turn>) -> Result<Self, ConversationError> {
        let conv = Conversation { turns };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<(), ConversationError> {
        if self.turns.is_empty() {
            return Err(ConversationError::Empty);
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(ConversationError::Alternation(i));
            }
        }
        let images: Vec<(usize, usize)> = self
            .turns
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| {
                t.parts
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| matches!(p, Part::Image(_)))
                    .map(move |(pi, _)| (ti, pi))
            })
            .collect();
        if images.len() > 1 || images.iter().any(|&(ti, _)| ti != 0) {
            return Err(ConversationError::ImagePlacement);
        }
        Ok(())
    }

    pub fn image(&self) -> Option<&str> {
        self.turns.first().and_then(Turn::image)
    }

    /// The final user turn: the current query.
    pub fn query(&self) -> Option<&Turn> {
        self.turns.last().filter(|t| t.role == Role::User)
    }

    /// Whether any turns precede the current query.
    pub fn has_history(&self) -> bool {
        self.turns.len() > 1
    }

    /// Image plus current query, dropping the dialog history.
    pub fn residual(&self) -> Conversation {
        let mut parts = Vec::new();
        if let Some(img) = self.image() {
            parts.push(Part::Image(img.to_string()));
        }
        if let Some(q) = self.turns.last() {
            parts.extend(q.parts.iter().filter(|p| matches!(p, Part::Text(_))).cloned());
        }
        Conversation {
            turns: vec![Turn::user(parts)],
        }
    }

    /// Current query only: no image, no history.
    pub fn query_only(&self) -> Conversation {
        let parts = self
            .turns
            .last()
            .map(|q| {
                q.parts
                    .iter()
                    .filter(|p| matches!(p, Part::Text(_)))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        Conversation {
            turns: vec![Turn::user(parts)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvSetting {
    CleanConv,
    HalluConv,
    FactConv,
    IrrConv,
}

impl ConvSetting {
    pub const ALL: [ConvSetting; 4] = [
        ConvSetting::CleanConv,
        ConvSetting::HalluConv,
        ConvSetting::FactConv,
        ConvSetting::IrrConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConvSetting::CleanConv => "clean_conv",
            ConvSetting::HalluConv => "hallu_conv",
            ConvSetting::FactConv => "fact_conv",
            ConvSetting::IrrConv => "irr_conv",
        }
    }
}

impl fmt::Display for ConvSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConvSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['-', '.'], "_");
        match norm.as_str() {
            "clean" | "clean_conv" | "cleanconv" => Ok(ConvSetting::CleanConv),
            "hallu" | "hallu_conv" | "halluconv" => Ok(ConvSetting::HalluConv),
            "fact" | "fact_conv" | "factconv" => Ok(ConvSetting::FactConv),
            "irr" | "irr_conv" | "irrconv" => Ok(ConvSetting::IrrConv),
            _ => Err(format!("unknown setting `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    QuestionPrompt,
    FormattingPrompt,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::QuestionPrompt => "question_prompt",
            PromptMode::FormattingPrompt => "formatting_prompt",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "question" | "question_prompt" => Ok(PromptMode::QuestionPrompt),
            "formatting" | "formatting_prompt" => Ok(PromptMode::FormattingPrompt),
            _ => Err(format!("unknown prompt mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Setting {
    pub context: ConvSetting,
    pub prompt: PromptMode,
}

impl Setting {
    pub fn new(context: ConvSetting, prompt: PromptMode) -> Self {
        Setting { context, prompt }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct IrrelevantPair {
    pub question: String,
    pub answer: String,
}

/// The fixed small-talk pool used for the irrelevant first round.
pub fn irrelevant_pool() -> &'static [IrrelevantPair] {
    static POOL: OnceLock<Vec<IrrelevantPair>> = OnceLock::new();
    POOL.get_or_init(|| {
        serde_json::from_str(include_str!("../data/irrelevant_pairs.json"))
            .expect("bundled irrelevant pool is valid")
    })
}

/// Picks the irrelevant pair for a sample; stable across runs and platforms.
pub fn irrelevant_pair_for(sample_id: &str) -> &'static IrrelevantPair {
    let pool = irrelevant_pool();
    let idx = stable_u64(&[b"irrelevant", sample_id.as_bytes()]) % pool.len() as u64;
    &pool[idx as usize]
}

/// The final-turn text for a question under a prompt mode.
pub fn query_text(question: &str, prompt: PromptMode) -> String {
    match prompt {
        PromptMode::QuestionPrompt => question.to_string(),
        PromptMode::FormattingPrompt => format!("{question} {FORMATTING_SENTENCE}"),
    }
}

/// Assembles the conversation a model sees for `sample` under `setting`.
pub fn build_conversation(
    sample: &SampleRecord,
    setting: Setting,
) -> Result<Conversation, ConversationError> {
    if sample.question.trim().is_empty() {
        return Err(ConversationError::EmptyQuestion(sample.id.clone()));
    }
    let image = Part::Image(sample.image_ref.clone());
    let query = Part::Text(query_text(&sample.question, setting.prompt));

    let first_round = |request: &str, reply: &str| {
        vec![
            Turn::user(vec![image.clone(), Part::Text(request.to_string())]),
            Turn::assistant(reply),
            Turn::user(vec![query.clone()]),
        ]
    };

    let turns = match setting.context {
        ConvSetting::CleanConv => vec![Turn::user(vec![image.clone(), query.clone()])],
        ConvSetting::HalluConv => {
            if !sample.verified {
                return Err(ConversationError::Unverified(sample.id.clone()));
            }
            if sample.hallu_description.trim().is_empty() {
                return Err(ConversationError::MissingContent {
                    id: sample.id.clone(),
                    what: "hallucinatory description",
                });
            }
            first_round(DESCRIBE_REQUEST, &sample.hallu_description)
        }
        ConvSetting::FactConv => {
            if !sample.verified {
                return Err(ConversationError::Unverified(sample.id.clone()));
            }
            if sample.fact_description.trim().is_empty() {
                return Err(ConversationError::MissingContent {
                    id: sample.id.clone(),
                    what: "fact description",
                });
            }
            first_round(DESCRIBE_REQUEST, &sample.fact_description)
        }
        ConvSetting::IrrConv => {
            let pair = irrelevant_pair_for(&sample.id);
            first_round(&pair.question, &pair.answer)
        }
    };
    Conversation::new(turns)
}
