//! Prompt templates for the curation generator.
//!
//! Template texts live under `data/templates/` and are versioned by file name. They use
//! `{name}` placeholders; substitution is a single pass, so values are never re-expanded.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    FactGen,
    ConflictGen,
    DescriptionGen,
    ConflictVerify,
    ImaginationObject,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::FactGen,
        TemplateId::ConflictGen,
        TemplateId::DescriptionGen,
        TemplateId::ConflictVerify,
        TemplateId::ImaginationObject,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::FactGen => "fact_gen.v1.txt",
            TemplateId::ConflictGen => "conflict_gen.v1.txt",
            TemplateId::DescriptionGen => "description_gen.v1.txt",
            TemplateId::ConflictVerify => "conflict_verify.v1.txt",
            TemplateId::ImaginationObject => "imagination_object.v1.txt",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::FactGen => include_str!("../data/templates/fact_gen.v1.txt"),
            TemplateId::ConflictGen => include_str!("../data/templates/conflict_gen.v1.txt"),
            TemplateId::DescriptionGen => include_str!("../data/templates/description_gen.v1.txt"),
            TemplateId::ConflictVerify => include_str!("../data/templates/conflict_verify.v1.txt"),
            TemplateId::ImaginationObject => {
                include_str!("../data/templates/imagination_object.v1.txt")
            }
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut seen = Vec::new();
        for cap in placeholder_re().captures_iter(self.text()) {
            let name = cap.get(1).unwrap().as_str();
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PromptError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

pub type PromptVars = BTreeMap<String, String>;

/// Convenience for building variable maps from string pairs.
pub fn vars<const N: usize>(pairs: [(&str, &str); N]) -> PromptVars {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn render_template(template: &str, vars: &PromptVars) -> Result<String, PromptError> {
    let re = placeholder_re();
    if let Some(missing) = re
        .captures_iter(template)
        .map(|c| c.get(1).unwrap().as_str())
        .find(|name| !vars.contains_key(*name))
    {
        return Err(PromptError::Unbound(missing.to_string()));
    }
    Ok(re
        .replace_all(template, |c: &regex::Captures<'_>| vars[&c[1]].clone())
        .into_owned())
}

pub fn render_prompt(id: TemplateId, vars: &PromptVars) -> Result<String, PromptError> {
    render_template(id.text(), vars)
}
