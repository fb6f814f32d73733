//! "Who provides this image" probe: a key sentence planted in the first-round reply,
//! then a three-way multiple-choice question about it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Conversation, ConversationError, Part, Turn, DESCRIBE_REQUEST};
use crate::record::SampleRecord;

pub const WPI_QUESTION: &str = "Who provides this image?";
pub const NONE_OPTION: &str = "None of the options are correct";
pub const LABELS: [char; 3] = ['A', 'B', 'C'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WpiOption {
    pub label: char,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WpiSample {
    pub base: String,
    pub key: String,
    pub distractor: String,
    pub options: Vec<WpiOption>,
    pub correct_label: char,
    pub insertion_index: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum WpiError {
    #[error("sample `{0}` has no sentence in its fact description")]
    NoSentences(String),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
}

pub fn key_sentence(key: &str) -> String {
    format!("The image is provided by {key}.")
}

pub fn is_six_digits(s: &str) -> bool {
    s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit())
}

/// Splits on `.`, `!` or `?` followed by whitespace. The terminator stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    let s = text[start..end].trim();
                    if !s.is_empty() {
                        out.push(s.to_string());
                    }
                    start = end;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn six_digits(rng: &mut impl Rng) -> String {
    rng.random_range(100_000u32..=999_999).to_string()
}

impl WpiSample {
    /// Final-turn text: the question followed by one labeled option per line.
    pub fn question_text(&self) -> String {
        let mut s = WPI_QUESTION.to_string();
        for o in &self.options {
            s.push_str(&format!("\n{}. {}", o.label, o.text));
        }
        s
    }

    pub fn label_of(&self, text: &str) -> Option<char> {
        self.options.iter().find(|o| o.text == text).map(|o| o.label)
    }
}

/// Builds the probe for `sample`. Identical `(sample, seed)` always gives identical output.
pub fn build_wpi_sample(
    sample: &SampleRecord,
    seed: u64,
) -> Result<(WpiSample, Conversation), WpiError> {
    let sentences = split_sentences(&sample.fact_description);
    if sentences.is_empty() {
        return Err(WpiError::NoSentences(sample.id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let key = six_digits(&mut rng);
    let distractor = loop {
        let d = six_digits(&mut rng);
        if d != key {
            break d;
        }
    };
    let insertion_index = rng.random_range(0..=sentences.len());

    let mut texts = vec![key.clone(), distractor.clone(), NONE_OPTION.to_string()];
    texts.shuffle(&mut rng);
    let options: Vec<WpiOption> = LABELS
        .iter()
        .zip(texts)
        .map(|(&label, text)| WpiOption { label, text })
        .collect();
    let correct_label = options
        .iter()
        .find(|o| o.text == key)
        .map(|o| o.label)
        .expect("key is always among the options");

    let mut with_key = sentences;
    with_key.insert(insertion_index, key_sentence(&key));
    let reply = with_key.join(" ");

    let wpi = WpiSample {
        base: sample.id.clone(),
        key,
        distractor,
        options,
        correct_label,
        insertion_index,
    };
    let conv = Conversation::new(vec![
        Turn::user(vec![
            Part::Image(sample.image_ref.clone()),
            Part::Text(DESCRIBE_REQUEST.to_string()),
        ]),
        Turn::assistant(reply),
        Turn::user(vec![Part::Text(wpi.question_text())]),
    ])?;
    Ok((wpi, conv))
}
