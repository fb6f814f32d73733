use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;
use crate::generator::GenError;
use crate::record::SampleRecord;

/// One GQA-style source record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "fullAnswer")]
    pub full_answer: String,
    #[serde(default)]
    pub regional_descriptions: Vec<String>,
    #[serde(default)]
    pub objects: Vec<String>,
}

impl RawRecord {
    /// Yes/no questions cannot carry a conflict of the other three types; they are
    /// turned into imagination probes when object annotations are available.
    pub fn routes_to_imagination(&self) -> bool {
        let a = self.answer.trim().to_lowercase();
        (a == "yes" || a == "no") && !self.objects.is_empty()
    }
}

pub fn parse_raw_records(text: &str) -> Result<Vec<RawRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

#[derive(Debug, Default)]
pub struct BuildConfig {
    pub allocation: AllocationConfig,
    /// Upper bound on samples processed concurrently; 0 means one.
    pub parallelism: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    AnswerAbsent,
    Unallocatable,
    ImaginationExhausted,
    NoConflict,
    MalformedGeneration,
    GeneratorRejected,
    NotContradicted,
    NotEntailed,
    FactNotEntailed,
    VerdictParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub reason: DropReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub input: usize,
    pub kept: usize,
    pub per_type: BTreeMap<HallucinationType, usize>,
    pub drops: BTreeMap<DropReason, usize>,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<SampleRecord>,
    pub stats: BuildStats,
}

enum Outcome {
    Kept(Box<SampleRecord>),
    Dropped(DropReason, String),
}

fn classify(err: BuilderError) -> Result<(DropReason, String), BuilderError> {
    let reason = match &err {
        BuilderError::Gen(GenError::Unavailable { .. }) => return Err(err),
        BuilderError::Gen(GenError::Config(_)) => return Err(err),
        BuilderError::Prompt(_) => return Err(err),
        BuilderError::AnswerAbsent(_) => DropReason::AnswerAbsent,
        BuilderError::Unallocatable(_) => DropReason::Unallocatable,
        BuilderError::ImaginationExhausted(_) => DropReason::ImaginationExhausted,
        BuilderError::NoConflict | BuilderError::ConflictFactMismatch(_) => DropReason::NoConflict,
        BuilderError::VerdictParse(_) => DropReason::VerdictParseFailure,
        BuilderError::Gen(_) => DropReason::GeneratorRejected,
        BuilderError::EmptyInput(_)
        | BuilderError::EmptyGeneration(_)
        | BuilderError::ConflictFormat(_) => DropReason::MalformedGeneration,
    };
    Ok((reason, err.to_string()))
}

fn process(raw: &RawRecord, cfg: &BuildConfig, gen: &dyn GenBackend) -> Result<Outcome, BuilderError> {
    let (question, answer, full_answer, htype, fact) = if raw.routes_to_imagination() {
        let qa = make_imagination_sample(&raw.objects, gen)?;
        let full = format!("No, there is no {} in the image.", qa.object);
        let fact = generate_fact(&qa.question, &full, gen)?;
        (qa.question, qa.answer, full, HallucinationType::Imagination, fact)
    } else {
        let fact = generate_fact(&raw.question, &raw.full_answer, gen)?;
        let htype = allocate_type(&raw.question, &raw.answer, &fact, &cfg.allocation)?;
        (
            raw.question.clone(),
            raw.answer.clone(),
            raw.full_answer.clone(),
            htype,
            fact,
        )
    };

    let conflict = create_conflict(&question, &answer, &fact, htype, gen)?;
    let hallu_regional = if htype == HallucinationType::Imagination {
        raw.regional_descriptions.clone()
    } else {
        rewrite_regional(&raw.regional_descriptions, &answer, &conflict.answer_neg)
    };
    let fact_description = generate_description(&raw.regional_descriptions, &fact, gen)?;
    let hallu_description = generate_description(&hallu_regional, &conflict.hallu_fact, gen)?;

    let mut outcome = verify_sample(&hallu_description, &answer, &conflict.answer_neg, gen)?;
    if !outcome.original_contradicted {
        return Ok(Outcome::Dropped(DropReason::NotContradicted, "original answer still supported".into()));
    }
    if !outcome.hallu_entailed {
        return Ok(Outcome::Dropped(DropReason::NotEntailed, "hallucinatory answer not supported".into()));
    }
    outcome.fact_entailed = Some(verify_fact_description(
        &fact_description,
        &answer,
        &conflict.answer_neg,
        gen,
    )?);
    if !outcome.kept() {
        return Ok(Outcome::Dropped(
            DropReason::FactNotEntailed,
            "ground description does not support the answer".into(),
        ));
    }

    let record = SampleRecord {
        id: raw.id.clone(),
        image_ref: raw.image_ref.clone(),
        question,
        answer_pos: answer,
        full_answer,
        fact,
        regional_descriptions: raw.regional_descriptions.clone(),
        hallucination_type: htype,
        answer_neg: conflict.answer_neg,
        hallu_fact: conflict.hallu_fact,
        hallu_regional_descriptions: hallu_regional,
        fact_description,
        hallu_description,
        verified: true,
        extra: Default::default(),
    };
    if let Err((field, reason)) = record.validate() {
        return Ok(Outcome::Dropped(
            DropReason::MalformedGeneration,
            format!("{field}: {reason}"),
        ));
    }
    Ok(Outcome::Kept(Box::new(record)))
}

/// Runs the curation pipeline over `source`.
///
/// Per-sample failures are recorded in the stats and skipped. A generator that stays
/// unavailable after retries aborts the whole build. Output order follows input order.
pub fn build_dataset(
    source: &[RawRecord],
    cfg: &BuildConfig,
    gen: &dyn GenBackend,
) -> Result<BuildOutput, BuilderError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<(String, Outcome), BuilderError>> = pool.install(|| {
        source
            .par_iter()
            .map(|raw| {
                let outcome = match process(raw, cfg, gen) {
                    Ok(o) => o,
                    Err(e) => {
                        let (reason, detail) = classify(e)?;
                        Outcome::Dropped(reason, detail)
                    }
                };
                Ok((raw.id.clone(), outcome))
            })
            .collect()
    });

    let mut stats = BuildStats {
        input: source.len(),
        per_type: HallucinationType::ALL.iter().map(|&t| (t, 0)).collect(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for r in results {
        match r? {
            (_, Outcome::Kept(record)) => {
                *stats.per_type.entry(record.hallucination_type).or_default() += 1;
                samples.push(*record);
            }
            (id, Outcome::Dropped(reason, detail)) => {
                *stats.drops.entry(reason).or_default() += 1;
                stats.failures.push(SampleFailure { id, reason, detail });
            }
        }
    }
    stats.kept = samples.len();
    Ok(BuildOutput { samples, stats })
}
