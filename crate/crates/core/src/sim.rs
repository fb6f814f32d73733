//! A table-driven simulated vision-language model.
//!
//! Every request is reduced to a [`ContextSignature`] (image present, kind of first
//! round, query present, task) and the sample it concerns. The scenario maps that pair
//! to a categorical distribution over a word-level vocabulary. Once any token has been
//! generated all mass moves to the end-of-sequence token, so every response is a single
//! word.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendMeta, Capabilities, ModelBackend};
use crate::conversation::{irrelevant_pool, Conversation, Role};
use crate::decoding::{regular_generate, SamplingConfig};
use crate::wpi::{split_sentences, NONE_OPTION, WPI_QUESTION};

/// Logit served for zero-probability tokens.
pub const LOGIT_FLOOR: f64 = -30.0;

/// WPI option roles usable as keys in a distribution.
pub const ROLE_KEY: &str = "@key";
pub const ROLE_DISTRACTOR: &str = "@distractor";
pub const ROLE_NONE: &str = "@none";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstRound {
    #[default]
    None,
    Hallu,
    Fact,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Qa,
    Wpi,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextSignature {
    pub has_image: bool,
    pub first_round: FirstRound,
    pub query_present: bool,
    #[serde(default)]
    pub task: Task,
}

impl ContextSignature {
    pub const fn qa(has_image: bool, first_round: FirstRound, query_present: bool) -> Self {
        ContextSignature { has_image, first_round, query_present, task: Task::Qa }
    }

    pub const fn wpi(has_image: bool, first_round: FirstRound) -> Self {
        ContextSignature { has_image, first_round, query_present: true, task: Task::Wpi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSample {
    pub id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub question: String,
    #[serde(default)]
    pub hallu_description: String,
    #[serde(default)]
    pub fact_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// `None` applies to every sample without a more specific entry.
    #[serde(default)]
    pub sample_id: Option<String>,
    pub signature: ContextSignature,
    pub probs: BTreeMap<String, f64>,
}

fn default_name() -> String {
    "simlvlm".into()
}

fn default_eos() -> String {
    "<eos>".into()
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub vocab: Vec<String>,
    #[serde(default = "default_eos")]
    pub eos: String,
    #[serde(default)]
    pub samples: Vec<ScenarioSample>,
    pub default: BTreeMap<String, f64>,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("duplicate vocabulary entry `{0}`")]
    DuplicateToken(String),
    #[error("end-of-sequence token `{0}` not in vocabulary")]
    MissingEos(String),
    #[error("{at}: unknown token `{token}`")]
    UnknownToken { at: String, token: String },
    #[error("{at}: {reason}")]
    BadDistribution { at: String, reason: String },
    #[error("{at}: option roles need tokens A, B and C in the vocabulary")]
    MissingLabels { at: String },
    #[error("duplicate behavior for {0}")]
    DuplicateBehavior(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Token(usize),
    Key,
    Distractor,
    None,
}

type Dist = Vec<(Slot, f64)>;

#[derive(Debug)]
struct Compiled {
    scenario: Scenario,
    eos: usize,
    labels: Option<[usize; 3]>,
    default: Dist,
    table: HashMap<(Option<String>, ContextSignature), Dist>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn compile(self) -> Result<Compiled, ScenarioError> {
        let mut index = HashMap::new();
        for (i, t) in self.vocab.iter().enumerate() {
            if index.insert(t.as_str(), i).is_some() {
                return Err(ScenarioError::DuplicateToken(t.clone()));
            }
        }
        let eos = *index.get(self.eos.as_str()).ok_or_else(|| ScenarioError::MissingEos(self.eos.clone()))?;
        let labels = match (index.get("A"), index.get("B"), index.get("C")) {
            (Some(&a), Some(&b), Some(&c)) => Some([a, b, c]),
            _ => None,
        };
        let dist = |at: String, probs: &BTreeMap<String, f64>| -> Result<Dist, ScenarioError> {
            let mut out = Vec::with_capacity(probs.len());
            let mut sum = 0.0;
            for (token, &p) in probs {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(ScenarioError::BadDistribution { at, reason: format!("`{token}` has probability {p}") });
                }
                sum += p;
                let slot = match token.as_str() {
                    ROLE_KEY => Slot::Key,
                    ROLE_DISTRACTOR => Slot::Distractor,
                    ROLE_NONE => Slot::None,
                    t => Slot::Token(
                        *index
                            .get(t)
                            .ok_or_else(|| ScenarioError::UnknownToken { at: at.clone(), token: t.into() })?,
                    ),
                };
                if !matches!(slot, Slot::Token(_)) && labels.is_none() {
                    return Err(ScenarioError::MissingLabels { at });
                }
                out.push((slot, p));
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ScenarioError::BadDistribution { at, reason: format!("sums to {sum}") });
            }
            Ok(out)
        };
        let default = dist("default".into(), &self.default)?;
        let mut table = HashMap::new();
        for (i, b) in self.behaviors.iter().enumerate() {
            let at = format!("behaviors[{i}]");
            let d = dist(at.clone(), &b.probs)?;
            if table.insert((b.sample_id.clone(), b.signature), d).is_some() {
                return Err(ScenarioError::DuplicateBehavior(at));
            }
        }
        Ok(Compiled { scenario: self, eos, labels, default, table })
    }
}

fn key_sentence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"The image is provided by (\d{6})\.").unwrap())
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^([ABC])\. (.+)$").unwrap())
}

fn squash(text: &str) -> String {
    split_sentences(text).join(" ")
}

/// Result of classifying a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classified {
    pub sample: Option<String>,
    pub signature: ContextSignature,
    /// False when a first round was present but matched nothing known.
    pub recognized: bool,
}

/// Reduces a request to the sample it concerns and its signature. Pure in the request.
pub fn signature_of(scenario: &Scenario, conv: &Conversation) -> Classified {
    let query = conv.turns.last().map(|t| t.text()).unwrap_or_default();
    let task = if query.trim_start().starts_with(WPI_QUESTION) { Task::Wpi } else { Task::Qa };
    let image = conv.image();

    let mut sample = match task {
        Task::Qa => scenario
            .samples
            .iter()
            .filter(|s| !s.question.is_empty() && query.contains(&s.question))
            .max_by_key(|s| s.question.len()),
        Task::Wpi => None,
    };
    let query_present = task == Task::Wpi || sample.is_some();
    if sample.is_none() {
        if let Some(img) = image {
            sample = scenario.samples.iter().find(|s| s.image_ref.as_deref() == Some(img));
        }
    }

    let mut first_round = FirstRound::None;
    let mut recognized = true;
    let history_reply = (conv.turns.len() >= 3)
        .then(|| &conv.turns[1])
        .filter(|t| t.role == Role::Assistant)
        .map(|t| t.text());
    if let Some(reply) = history_reply {
        let stripped = squash(&key_sentence_re().replace_all(&reply, ""));
        let matches = |s: &ScenarioSample| -> Option<FirstRound> {
            if !s.hallu_description.is_empty() && squash(&s.hallu_description) == stripped {
                Some(FirstRound::Hallu)
            } else if !s.fact_description.is_empty() && squash(&s.fact_description) == stripped {
                Some(FirstRound::Fact)
            } else {
                None
            }
        };
        let found = match sample {
            Some(s) => matches(s).map(|f| (s, f)),
            None => scenario.samples.iter().find_map(|s| matches(s).map(|f| (s, f))),
        };
        if let Some((s, f)) = found {
            sample = Some(s);
            first_round = f;
        } else if irrelevant_pool().iter().any(|p| p.answer == reply) {
            first_round = FirstRound::Irrelevant;
        } else {
            recognized = false;
        }
    }

    Classified {
        sample: sample.map(|s| s.id.clone()),
        signature: ContextSignature { has_image: image.is_some(), first_round, query_present, task },
        recognized,
    }
}

/// Serves a [`Scenario`] through the [`ModelBackend`] contract.
#[derive(Debug)]
pub struct ScenarioBackend {
    meta: BackendMeta,
    probe_meta: BackendMeta,
    compiled: Compiled,
    unrecognized: AtomicUsize,
}

impl ScenarioBackend {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        Self::with_capabilities(scenario, Capabilities { logits: true, complete: true })
    }

    pub fn with_capabilities(scenario: Scenario, capabilities: Capabilities) -> Result<Self, ScenarioError> {
        let compiled = scenario.compile()?;
        let meta = BackendMeta {
            name: compiled.scenario.name.clone(),
            vocab_size: compiled.scenario.vocab.len(),
            eos_token_id: compiled.eos as u32,
            capabilities,
        };
        let probe_meta = BackendMeta { capabilities: Capabilities { logits: true, complete: false }, ..meta.clone() };
        Ok(ScenarioBackend { meta, probe_meta, compiled, unrecognized: AtomicUsize::new(0) })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.compiled.scenario
    }

    /// Requests whose first round could not be classified.
    pub fn unrecognized_count(&self) -> usize {
        self.unrecognized.load(Ordering::Relaxed)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.compiled.scenario.vocab.iter().position(|t| t == token).map(|i| i as u32)
    }

    /// Next-token probabilities for a request.
    pub fn distribution(&self, conv: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError> {
        let c = &self.compiled;
        let vocab = c.scenario.vocab.len();
        if let Some(&bad) = generated.iter().find(|&&t| t as usize >= vocab) {
            return Err(BackendError::BadRequest(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut probs = vec![0.0; vocab];
        if !generated.is_empty() {
            probs[c.eos] = 1.0;
            return Ok(probs);
        }
        let cls = signature_of(&c.scenario, conv);
        if !cls.recognized {
            self.unrecognized.fetch_add(1, Ordering::Relaxed);
        }
        let dist = c
            .table
            .get(&(cls.sample.clone(), cls.signature))
            .or_else(|| c.table.get(&(None, cls.signature)))
            .unwrap_or(&c.default);

        let roles = c.labels.and_then(|labels| resolve_roles(conv, labels));
        for &(slot, p) in dist {
            match (slot, &roles) {
                (Slot::Token(i), _) => probs[i] += p,
                (Slot::None, Some(r)) => probs[r.none] += p,
                (Slot::Key, Some(r)) | (Slot::Distractor, Some(r)) => match r.key {
                    Some((key, distractor)) => probs[if slot == Slot::Key { key } else { distractor }] += p,
                    None => {
                        probs[r.numeric[0]] += p / 2.0;
                        probs[r.numeric[1]] += p / 2.0;
                    }
                },
                (_, None) => probs[c.eos] += p,
            }
        }
        Ok(probs)
    }
}

struct Roles {
    none: usize,
    numeric: [usize; 2],
    /// (key, distractor) token ids when the history reveals the key.
    key: Option<(usize, usize)>,
}

fn resolve_roles(conv: &Conversation, labels: [usize; 3]) -> Option<Roles> {
    let query = conv.turns.last()?.text();
    if !query.trim_start().starts_with(WPI_QUESTION) {
        return None;
    }
    let options: Vec<(usize, String)> = option_re()
        .captures_iter(&query)
        .map(|c| ((c[1].as_bytes()[0] - b'A') as usize, c[2].trim().to_string()))
        .collect();
    if options.len() != 3 {
        return None;
    }
    let none = options.iter().find(|(_, t)| t == NONE_OPTION)?.0;
    let numeric: Vec<usize> = options.iter().filter(|(_, t)| t != NONE_OPTION).map(|(l, _)| *l).collect();
    if numeric.len() != 2 {
        return None;
    }
    let history: String = conv.turns[..conv.turns.len() - 1].iter().map(|t| t.text()).collect::<Vec<_>>().join("\n");
    let key = key_sentence_re().captures(&history).and_then(|c| {
        let k = &c[1];
        let key_label = options.iter().find(|(_, t)| t == k)?.0;
        let other = *numeric.iter().find(|&&l| l != key_label)?;
        Some((labels[key_label], labels[other]))
    });
    Some(Roles { none: labels[none], numeric: [labels[numeric[0]], labels[numeric[1]]], key })
}

/// Natural-log probabilities with zero mapped to [`LOGIT_FLOOR`].
pub fn probs_to_logits(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| if p > 0.0 { p.ln().max(LOGIT_FLOOR) } else { LOGIT_FLOOR }).collect()
}

impl ModelBackend for ScenarioBackend {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn logits(&self, conversation: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError> {
        if !self.meta.capabilities.logits {
            return Err(BackendError::Capability("logits"));
        }
        Ok(probs_to_logits(&self.distribution(conversation, generated)?))
    }

    fn complete(
        &self,
        conversation: &Conversation,
        sampling: &SamplingConfig,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        if !self.meta.capabilities.complete {
            return Err(BackendError::Capability("complete"));
        }
        // decode against the table directly so a logits-less configuration still answers
        let inner = ScenarioProbe(self);
        regular_generate(&inner, conversation, sampling, max_new_tokens)
            .map(|g| g.text)
            .map_err(|e| BackendError::Other(e.to_string()))
    }

    fn detokenize(&self, tokens: &[u32]) -> Result<String, BackendError> {
        let vocab = &self.compiled.scenario.vocab;
        let mut words = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let word = vocab
                .get(t as usize)
                .ok_or_else(|| BackendError::BadRequest(format!("token id {t} outside vocabulary of {}", vocab.len())))?;
            if t as usize != self.compiled.eos {
                words.push(word.as_str());
            }
        }
        Ok(words.join(" "))
    }
}

struct ScenarioProbe<'a>(&'a ScenarioBackend);

impl ModelBackend for ScenarioProbe<'_> {
    #[allow(clippy::misnamed_getters)]
    fn meta(&self) -> &BackendMeta {
        &self.0.probe_meta
    }
    fn logits(&self, conversation: &Conversation, generated: &[u32]) -> Result<Vec<f64>, BackendError> {
        Ok(probs_to_logits(&self.0.distribution(conversation, generated)?))
    }
    fn complete(&self, _: &Conversation, _: &SamplingConfig, _: usize) -> Result<String, BackendError> {
        Err(BackendError::Capability("complete"))
    }
    fn detokenize(&self, tokens: &[u32]) -> Result<String, BackendError> {
        self.0.detokenize(tokens)
    }
}

pub mod synth;

#[cfg(test)]
mod tests;
