//! Curated sample records and their newline-delimited file format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// The hallucination category a sample's conflict was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationType {
    Existence,
    Attribute,
    Relation,
    Imagination,
}

impl HallucinationType {
    pub const ALL: [HallucinationType; 4] = [
        HallucinationType::Existence,
        HallucinationType::Attribute,
        HallucinationType::Relation,
        HallucinationType::Imagination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HallucinationType::Existence => "existence",
            HallucinationType::Attribute => "attribute",
            HallucinationType::Relation => "relation",
            HallucinationType::Imagination => "imagination",
        }
    }
}

impl fmt::Display for HallucinationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HallucinationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HallucinationType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown hallucination type `{s}`"))
    }
}

/// One curated question-answer instance with its original and hallucinatory context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub answer_pos: String,
    pub full_answer: String,
    pub fact: String,
    pub regional_descriptions: Vec<String>,
    pub hallucination_type: HallucinationType,
    pub answer_neg: String,
    pub hallu_fact: String,
    pub hallu_regional_descriptions: Vec<String>,
    pub fact_description: String,
    pub hallu_description: String,
    pub verified: bool,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: sample `{id}`: invalid `{field}`: {reason}")]
    Invalid {
        line: usize,
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Matches the imagination question template and captures the object slot.
pub fn imagination_object(question: &str) -> Option<&str> {
    let rest = question
        .strip_prefix("Is there an ")
        .or_else(|| question.strip_prefix("Is there a "))?;
    let object = rest.strip_suffix(" in the image?")?;
    (!object.trim().is_empty()).then_some(object)
}

impl SampleRecord {
    /// Checks the record-level invariants, returning the offending field on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.id.trim().is_empty() {
            return Err(("id", "must be nonempty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(("question", "must be nonempty".into()));
        }
        if self.answer_pos.trim().is_empty() {
            return Err(("answer_pos", "must be nonempty".into()));
        }
        if self.answer_neg.trim().is_empty() {
            return Err(("answer_neg", "must be nonempty".into()));
        }
        if self.answer_pos.trim().to_lowercase() == self.answer_neg.trim().to_lowercase() {
            return Err(("answer_neg", "answers must conflict".into()));
        }
        if self.hallucination_type == HallucinationType::Imagination {
            if self.answer_pos != "No" {
                return Err(("answer_pos", "imagination samples must answer \"No\"".into()));
            }
            if imagination_object(&self.question).is_none() {
                return Err((
                    "question",
                    "imagination question must read \"Is there a <object> in the image?\"".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical one-line serialization: fixed field order, unknown fields sorted after.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample records always serialize")
    }
}

/// Parses a newline-delimited sample file. Blank lines are skipped; line numbers are 1-based.
pub fn parse_samples(input: &str) -> Result<Vec<SampleRecord>, RecordError> {
    let mut out = Vec::new();
    for (idx, raw) in input.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(raw).map_err(|source| RecordError::Malformed { line, source })?;
        record
            .validate()
            .map_err(|(field, reason)| RecordError::Invalid {
                line,
                id: record.id.clone(),
                field,
                reason,
            })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_samples(path: impl AsRef<std::path::Path>) -> Result<Vec<SampleRecord>, RecordError> {
    let text = std::fs::read_to_string(path)?;
    parse_samples(&text)
}

/// Serializes records in canonical form, one per line, with a trailing newline.
pub fn serialize_samples(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}
