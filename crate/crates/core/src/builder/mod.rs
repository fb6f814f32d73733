//! Dataset construction: fact generation, hallucination-type allocation, conflict
//! creation, description generation and verification.

mod pipeline;
pub mod pos;

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::generator::{GenBackend, GenError, GenRequest};
use crate::prompt::{render_prompt, vars, PromptError, TemplateId};
use crate::record::{imagination_object, HallucinationType};

pub use pipeline::{
    build_dataset, parse_raw_records, BuildConfig, BuildOutput, BuildStats, DropReason, RawRecord, SampleFailure,
};
pub use pos::{Pos, PosTagger, RuleTagger};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuilderError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0} must be nonempty")]
    EmptyInput(&'static str),
    #[error("generator returned an empty {0}")]
    EmptyGeneration(&'static str),
    #[error("answer `{0}` does not occur in the fact sentence")]
    AnswerAbsent(String),
    #[error("unallocatable answer `{0}`")]
    Unallocatable(String),
    #[error("generator kept proposing annotated objects (last: `{0}`)")]
    ImaginationExhausted(String),
    #[error("no conflict produced")]
    NoConflict,
    #[error("malformed conflict response: {0}")]
    ConflictFormat(String),
    #[error("hallucinatory fact does not contain the hallucinatory answer `{0}`")]
    ConflictFactMismatch(String),
    #[error("verdict parse failure: {0:?}")]
    VerdictParse(String),
}

pub struct AllocationConfig {
    pub relation_vocabulary: BTreeSet<String>,
    pub tagger: Arc<dyn PosTagger>,
}

impl AllocationConfig {
    /// Parses a vocabulary file: one term per line, `#` comments and blank lines ignored.
    pub fn parse_vocabulary(text: &str) -> BTreeSet<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| words(l).join(" "))
            .collect()
    }
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig {
            relation_vocabulary: Self::parse_vocabulary(include_str!(
                "../../data/relation_vocabulary.txt"
            )),
            tagger: Arc::new(RuleTagger),
        }
    }
}

impl std::fmt::Debug for AllocationConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AllocationConfig")
            .field("relation_vocabulary", &self.relation_vocabulary)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationOutcome {
    pub original_contradicted: bool,
    pub hallu_entailed: bool,
    /// Whether the ground description entails the original answer; `None` until checked.
    pub fact_entailed: Option<bool>,
}

impl VerificationOutcome {
    pub fn kept(&self) -> bool {
        self.original_contradicted && self.hallu_entailed && self.fact_entailed.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImaginationQa {
    pub object: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub answer_neg: String,
    pub hallu_fact: String,
}

/// Lowercased alphanumeric word tokens.
pub(crate) fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

fn find_phrase(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn ask(gen: &dyn GenBackend, prompt: String) -> Result<String, BuilderError> {
    Ok(gen.complete(&GenRequest::new(prompt))?)
}

fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label).then(|| line[label.len()..].trim())
}

fn clean_answer(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .trim_end_matches(['.', '!', '?'])
        .trim()
        .to_string()
}

/// Rewrites a question and its full answer into one declarative fact sentence.
pub fn generate_fact(
    question: &str,
    full_answer: &str,
    gen: &dyn GenBackend,
) -> Result<String, BuilderError> {
    if question.trim().is_empty() {
        return Err(BuilderError::EmptyInput("question"));
    }
    if full_answer.trim().is_empty() {
        return Err(BuilderError::EmptyInput("full answer"));
    }
    let prompt = render_prompt(
        TemplateId::FactGen,
        &vars([("question", question), ("fullAnswer", full_answer)]),
    )?;
    let reply = ask(gen, prompt)?;
    let line = first_line(&reply);
    let line = strip_label(line, "fact:").unwrap_or(line).trim();
    if line.is_empty() {
        return Err(BuilderError::EmptyGeneration("fact"));
    }
    let body = line.trim_end_matches(['.', '!', '?']).trim_end();
    if body.is_empty() {
        return Err(BuilderError::EmptyGeneration("fact"));
    }
    Ok(format!("{body}."))
}

/// Chooses the hallucination type whose conflict will invalidate `answer`.
///
/// Relation-vocabulary answers win; otherwise adjectives and verbs give attribute and
/// nouns give existence. Imagination is never produced here.
pub fn allocate_type(
    question: &str,
    answer: &str,
    fact: &str,
    cfg: &AllocationConfig,
) -> Result<HallucinationType, BuilderError> {
    let fact_words = words(fact);
    let answer_words = words(answer);
    let start = find_phrase(&fact_words, &answer_words)
        .ok_or_else(|| BuilderError::AnswerAbsent(answer.to_string()))?;
    if cfg.relation_vocabulary.contains(&answer_words.join(" ")) {
        return Ok(HallucinationType::Relation);
    }
    let head = start + answer_words.len() - 1;
    match cfg.tagger.tag(&fact_words, head) {
        Pos::Adjective | Pos::Verb => Ok(HallucinationType::Attribute),
        Pos::Noun => {
            // color and material names read as nouns in some facts
            let q = words(question);
            if q.iter().any(|w| matches!(w.as_str(), "color" | "colour" | "material")) {
                Ok(HallucinationType::Attribute)
            } else {
                Ok(HallucinationType::Existence)
            }
        }
        Pos::Other => Err(BuilderError::Unallocatable(answer.to_string())),
    }
}

const IMAGINATION_ATTEMPTS: usize = 3;

/// Asks the generator for a plausible object absent from `objects` and builds the
/// "Is there a ... in the image?" / "No" pair around it.
pub fn make_imagination_sample(
    objects: &[String],
    gen: &dyn GenBackend,
) -> Result<ImaginationQa, BuilderError> {
    if objects.is_empty() {
        return Err(BuilderError::EmptyInput("objects"));
    }
    let annotated: BTreeSet<String> = objects.iter().map(|o| o.trim().to_lowercase()).collect();
    let listing = objects.join(", ");
    let mut rejected: Vec<String> = Vec::new();
    for _ in 0..IMAGINATION_ATTEMPTS {
        let avoid = if rejected.is_empty() {
            "none".to_string()
        } else {
            rejected.join(", ")
        };
        let prompt = render_prompt(
            TemplateId::ImaginationObject,
            &vars([("objects", listing.as_str()), ("avoid", avoid.as_str())]),
        )?;
        let reply = ask(gen, prompt)?;
        let mut object = clean_answer(first_line(&reply)).to_lowercase();
        for article in ["a ", "an ", "the "] {
            if let Some(rest) = object.strip_prefix(article) {
                object = rest.trim().to_string();
            }
        }
        if object.is_empty() {
            return Err(BuilderError::EmptyGeneration("imagination object"));
        }
        if annotated.contains(&object) {
            rejected.push(object);
            continue;
        }
        return Ok(ImaginationQa {
            question: format!("Is there a {object} in the image?"),
            answer: "No".to_string(),
            object,
        });
    }
    Err(BuilderError::ImaginationExhausted(
        rejected.pop().unwrap_or_default(),
    ))
}

/// Produces a hallucinatory answer contradicting `answer` and a fact supporting it.
pub fn create_conflict(
    question: &str,
    answer: &str,
    fact: &str,
    htype: HallucinationType,
    gen: &dyn GenBackend,
) -> Result<Conflict, BuilderError> {
    if htype == HallucinationType::Imagination {
        let object = imagination_object(question)
            .ok_or(BuilderError::ConflictFormat("imagination question template".into()))?;
        return Ok(Conflict {
            answer_neg: "Yes".to_string(),
            hallu_fact: format!("There is a {object} in the image."),
        });
    }
    let prompt = render_prompt(
        TemplateId::ConflictGen,
        &vars([
            ("question", question),
            ("answer", answer),
            ("fact", fact),
            ("hallucination_type", htype.as_str()),
        ]),
    )?;
    let reply = ask(gen, prompt)?;
    let mut answer_neg = None;
    let mut hallu_fact = None;
    for line in reply.lines().map(str::trim) {
        if let Some(v) = strip_label(line, "conflict answer:").or_else(|| strip_label(line, "answer:")) {
            answer_neg.get_or_insert_with(|| clean_answer(v));
        } else if let Some(v) = strip_label(line, "conflict fact:").or_else(|| strip_label(line, "fact:")) {
            hallu_fact.get_or_insert_with(|| v.to_string());
        }
    }
    let answer_neg = answer_neg
        .filter(|a| !a.is_empty())
        .ok_or_else(|| BuilderError::ConflictFormat("missing conflict answer".into()))?;
    if answer_neg.to_lowercase() == answer.trim().to_lowercase() {
        return Err(BuilderError::NoConflict);
    }
    let hallu_fact = match hallu_fact.filter(|f| !f.is_empty()) {
        Some(f) => f,
        // no rewritten fact: fall back to substituting the answer in place
        None => rewrite_text(fact, answer, &answer_neg),
    };
    if find_phrase(&words(&hallu_fact), &words(&answer_neg)).is_none() {
        return Err(BuilderError::ConflictFactMismatch(answer_neg));
    }
    Ok(Conflict {
        answer_neg,
        hallu_fact,
    })
}

/// Replaces whole-word, ASCII-case-insensitive occurrences of `from` in `text`.
pub fn rewrite_text(text: &str, from: &str, to: &str) -> String {
    if from.is_empty() {
        return text.to_string();
    }
    let hay = text.to_ascii_lowercase();
    let needle = from.to_ascii_lowercase();
    let bytes = text.as_bytes();
    let is_letter = |i: usize| bytes[i].is_ascii_alphabetic();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    let mut search = 0;
    while let Some(found) = hay[search..].find(&needle) {
        let start = search + found;
        let end = start + needle.len();
        let left_ok = start == 0 || !is_letter(start - 1);
        let right_ok = end == bytes.len() || !is_letter(end);
        if left_ok && right_ok {
            out.push_str(&text[cursor..start]);
            out.push_str(to);
            cursor = end;
            search = end;
        } else {
            search = start + hay[start..].chars().next().map_or(1, char::len_utf8);
        }
        if search >= hay.len() {
            break;
        }
    }
    out.push_str(&text[cursor..]);
    out
}

/// Heuristic rewrite of regional descriptions toward the hallucinatory answer.
pub fn rewrite_regional(regional: &[String], answer: &str, answer_neg: &str) -> Vec<String> {
    regional
        .iter()
        .map(|r| rewrite_text(r, answer, answer_neg))
        .collect()
}

/// Bullet list of regional descriptions as it appears in the description prompt.
pub fn regional_listing(regional: &[String]) -> String {
    if regional.is_empty() {
        return "(none)".to_string();
    }
    regional
        .iter()
        .map(|r| format!("- {r}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Generates a detailed image description that entails `fact`.
pub fn generate_description(
    regional: &[String],
    fact: &str,
    gen: &dyn GenBackend,
) -> Result<String, BuilderError> {
    if fact.trim().is_empty() {
        return Err(BuilderError::EmptyInput("fact"));
    }
    let listing = regional_listing(regional);
    let prompt = render_prompt(
        TemplateId::DescriptionGen,
        &vars([("regional_descriptions", listing.as_str()), ("fact", fact)]),
    )?;
    let reply = ask(gen, prompt)?;
    let text = reply.trim();
    let text = strip_label(text, "description:").unwrap_or(text).trim();
    if text.is_empty() {
        return Err(BuilderError::EmptyGeneration("description"));
    }
    Ok(text.to_string())
}

/// Reads a yes/no verdict from the first line of a generator reply.
pub fn parse_verdict(reply: &str) -> Result<bool, BuilderError> {
    let line = first_line(reply).to_lowercase();
    let first_word: String = line
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match first_word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(BuilderError::VerdictParse(first_line(reply).to_string())),
    }
}

fn ask_correct(
    description: &str,
    candidate: &str,
    competitor: &str,
    gen: &dyn GenBackend,
) -> Result<bool, BuilderError> {
    let prompt = render_prompt(
        TemplateId::ConflictVerify,
        &vars([
            ("answer", candidate),
            ("modified", competitor),
            ("modified_description", description),
        ]),
    )?;
    parse_verdict(&ask(gen, prompt)?)
}

/// Checks a hallucinatory description: the original answer must be contradicted and the
/// hallucinatory answer entailed.
pub fn verify_sample(
    description: &str,
    answer: &str,
    answer_neg: &str,
    gen: &dyn GenBackend,
) -> Result<VerificationOutcome, BuilderError> {
    for (what, v) in [("description", description), ("answer", answer), ("hallucinatory answer", answer_neg)] {
        if v.trim().is_empty() {
            return Err(BuilderError::EmptyInput(what));
        }
    }
    let original_correct = ask_correct(description, answer, answer_neg, gen)?;
    let hallu_correct = ask_correct(description, answer_neg, answer, gen)?;
    Ok(VerificationOutcome {
        original_contradicted: !original_correct,
        hallu_entailed: hallu_correct,
        fact_entailed: None,
    })
}

/// Checks that the ground description supports the original answer.
pub fn verify_fact_description(
    description: &str,
    answer: &str,
    answer_neg: &str,
    gen: &dyn GenBackend,
) -> Result<bool, BuilderError> {
    ask_correct(description, answer, answer_neg, gen)
}
