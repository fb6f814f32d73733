//! Entailment scoring, accuracy / flip-rate / weak flip-rate, WPI scoring and report
//! aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::conversation::{ConvSetting, PromptMode};
use crate::record::HallucinationType;
use crate::wpi::WpiSample;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// The expected answer must occur as a whole-word run of tokens.
    #[default]
    WordBoundary,
    /// Plain substring containment after normalization.
    Substring,
}

/// Lowercases, drops apostrophes, turns every other non-alphanumeric character into a
/// space and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .filter(|c| !matches!(c, '\'' | '\u{2019}'))
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 if `expected` is entailed in `response`, else 0. An expected answer that
/// normalizes to nothing never matches.
pub fn entailment_score_with(expected: &str, response: &str, mode: MatchMode) -> u8 {
    let e = normalize(expected);
    if e.is_empty() {
        return 0;
    }
    let r = normalize(response);
    let hit = match mode {
        MatchMode::Substring => r.contains(&e),
        MatchMode::WordBoundary => {
            let et: Vec<&str> = e.split(' ').collect();
            let rt: Vec<&str> = r.split(' ').collect();
            rt.windows(et.len()).any(|w| w == et.as_slice())
        }
    };
    hit as u8
}

pub fn entailment_score(expected: &str, response: &str) -> u8 {
    entailment_score_with(expected, response, MatchMode::WordBoundary)
}

/// One generated response under one setting, scored against both answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub sample_id: String,
    pub model: String,
    pub decoding: String,
    pub setting: ConvSetting,
    pub prompt_mode: PromptMode,
    pub hallucination_type: HallucinationType,
    pub response: String,
    pub score_pos: u8,
    pub score_neg: u8,
}

impl EvalOutcome {
    #[allow(clippy::too_many_arguments)]
    pub fn scored(
        sample: &crate::record::SampleRecord,
        model: &str,
        decoding: &str,
        setting: ConvSetting,
        prompt_mode: PromptMode,
        response: String,
        mode: MatchMode,
    ) -> Self {
        EvalOutcome {
            sample_id: sample.id.clone(),
            model: model.into(),
            decoding: decoding.into(),
            setting,
            prompt_mode,
            hallucination_type: sample.hallucination_type,
            score_pos: entailment_score_with(&sample.answer_pos, &response, mode),
            score_neg: entailment_score_with(&sample.answer_neg, &response, mode),
            response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpiOutcome {
    pub sample_id: String,
    pub model: String,
    pub decoding: String,
    pub response: String,
    pub correct_label: char,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no outcomes")]
    Empty,
    #[error("sample id mismatch: {0}")]
    IdMismatch(String),
    #[error("duplicate sample id: {0}")]
    Duplicate(String),
    #[error("missing CleanConv baseline for {0}")]
    MissingBaseline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Pos,
    Neg,
}

pub fn accuracy(outcomes: &[EvalOutcome], target: Target) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits: usize = outcomes
        .iter()
        .map(|o| match target {
            Target::Pos => o.score_pos as usize,
            Target::Neg => o.score_neg as usize,
        })
        .sum();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Counts behind FR and WFR for one clean/setting pairing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub n: usize,
    /// |D⁺|: samples answered correctly without a first round.
    pub d_plus: usize,
    pub flipped: usize,
    pub weak_flipped: usize,
    /// D⁺ samples whose setting response matches both answers.
    pub double_match: usize,
}

impl FlipCounts {
    pub fn fr(&self) -> Option<f64> {
        (self.d_plus > 0).then(|| self.flipped as f64 / self.d_plus as f64)
    }

    pub fn wfr(&self) -> Option<f64> {
        (self.d_plus > 0).then(|| self.weak_flipped as f64 / self.d_plus as f64)
    }
}

fn index_by_id(outcomes: &[EvalOutcome]) -> Result<HashMap<&str, &EvalOutcome>, MetricsError> {
    let mut map = HashMap::with_capacity(outcomes.len());
    for o in outcomes {
        if map.insert(o.sample_id.as_str(), o).is_some() {
            return Err(MetricsError::Duplicate(o.sample_id.clone()));
        }
    }
    Ok(map)
}

/// Pairs clean and setting outcomes by sample id. Both lists must cover the same ids.
pub fn flip_counts(clean: &[EvalOutcome], hallu: &[EvalOutcome]) -> Result<FlipCounts, MetricsError> {
    let by_id = index_by_id(hallu)?;
    if clean.len() != hallu.len() {
        return Err(MetricsError::IdMismatch(format!(
            "{} clean vs {} setting outcomes",
            clean.len(),
            hallu.len()
        )));
    }
    let mut counts = FlipCounts { n: clean.len(), ..Default::default() };
    let mut seen = BTreeSet::new();
    for c in clean {
        if !seen.insert(c.sample_id.as_str()) {
            return Err(MetricsError::Duplicate(c.sample_id.clone()));
        }
        let h = by_id
            .get(c.sample_id.as_str())
            .ok_or_else(|| MetricsError::IdMismatch(c.sample_id.clone()))?;
        if c.score_pos != 1 {
            continue;
        }
        counts.d_plus += 1;
        counts.flipped += (h.score_neg == 1) as usize;
        counts.weak_flipped += (h.score_pos == 0) as usize;
        counts.double_match += (h.score_pos == 1 && h.score_neg == 1) as usize;
    }
    Ok(counts)
}

pub fn flip_rate(clean: &[EvalOutcome], hallu: &[EvalOutcome]) -> Result<Option<f64>, MetricsError> {
    Ok(flip_counts(clean, hallu)?.fr())
}

pub fn weak_flip_rate(clean: &[EvalOutcome], hallu: &[EvalOutcome]) -> Result<Option<f64>, MetricsError> {
    Ok(flip_counts(clean, hallu)?.wfr())
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([ABC])\)|\b([ABC])\b").unwrap())
}

/// Option labels mentioned in a response, as standalone capitals or "(X)".
pub fn mentioned_labels(response: &str) -> BTreeSet<char> {
    label_re()
        .captures_iter(response)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .filter_map(|m| m.as_str().chars().next())
        .collect()
}

/// 1 iff the response names exactly one option label and it is the correct one.
pub fn wpi_score(response: &str, wpi: &WpiSample) -> u8 {
    let labels = mentioned_labels(response);
    (labels.len() == 1 && labels.contains(&wpi.correct_label)) as u8
}

/// Row of the Acc / Acc / FR / WFR table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub decoding: String,
    pub setting: ConvSetting,
    pub prompt_mode: PromptMode,
    /// `None` is the "all" row.
    pub hallucination_type: Option<HallucinationType>,
    pub n: usize,
    pub acc_clean: f64,
    pub acc_setting: f64,
    pub fr: Option<f64>,
    pub wfr: Option<f64>,
    pub double_match: usize,
}

impl ReportRow {
    pub fn group(&self) -> String {
        let t = self.hallucination_type.map_or("all", |t| t.as_str());
        format!(
            "{}/{}/{}/{}/{}",
            self.model,
            self.decoding,
            self.setting.as_str(),
            self.prompt_mode.as_str(),
            t
        )
    }

    pub fn acc_drop(&self) -> f64 {
        self.acc_clean - self.acc_setting
    }
}

type GroupKey = (String, String, PromptMode);

fn row(
    key: &GroupKey,
    setting: ConvSetting,
    htype: Option<HallucinationType>,
    clean: &[EvalOutcome],
    other: &[EvalOutcome],
) -> Result<ReportRow, MetricsError> {
    let counts = flip_counts(clean, other)?;
    Ok(ReportRow {
        model: key.0.clone(),
        decoding: key.1.clone(),
        setting,
        prompt_mode: key.2,
        hallucination_type: htype,
        n: clean.len(),
        acc_clean: accuracy(clean, Target::Pos)?,
        acc_setting: accuracy(other, Target::Pos)?,
        fr: counts.fr(),
        wfr: counts.wfr(),
        double_match: counts.double_match,
    })
}

/// Groups outcomes by (model, decoding, prompt mode, setting) and emits, for every
/// setting, one row per hallucination type present followed by the "all" row.
///
/// CleanConv outcomes of the same model, decoding and prompt mode are the baseline.
/// A group with only CleanConv outcomes is reported against itself.
pub fn aggregate_report(outcomes: &[EvalOutcome]) -> Result<Vec<ReportRow>, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<GroupKey, BTreeMap<ConvSetting, Vec<EvalOutcome>>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((o.model.clone(), o.decoding.clone(), o.prompt_mode))
            .or_default()
            .entry(o.setting)
            .or_default()
            .push(o.clone());
    }

    let mut rows = Vec::new();
    for (key, by_setting) in &groups {
        let clean = by_setting.get(&ConvSetting::CleanConv).ok_or_else(|| {
            MetricsError::MissingBaseline(format!("{}/{}/{}", key.0, key.1, key.2.as_str()))
        })?;
        let targets: Vec<ConvSetting> = if by_setting.len() == 1 {
            vec![ConvSetting::CleanConv]
        } else {
            by_setting.keys().copied().filter(|s| *s != ConvSetting::CleanConv).collect()
        };
        for setting in targets {
            let other = &by_setting[&setting];
            for t in HallucinationType::ALL {
                let c: Vec<_> = clean.iter().filter(|o| o.hallucination_type == t).cloned().collect();
                let s: Vec<_> = other.iter().filter(|o| o.hallucination_type == t).cloned().collect();
                if c.is_empty() && s.is_empty() {
                    continue;
                }
                rows.push(row(key, setting, Some(t), &c, &s)?);
            }
            rows.push(row(key, setting, None, clean, other)?);
        }
    }
    Ok(rows)
}

/// Percentage with two decimals, or "—" when undefined.
pub fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => "—".into(),
    }
}

pub const CSV_HEADER: [&str; 6] = ["group", "n", "acc_clean", "acc_setting", "fr", "wfr"];

fn cells(r: &ReportRow) -> [String; 6] {
    [
        r.group(),
        r.n.to_string(),
        fmt_pct(Some(r.acc_clean)),
        fmt_pct(Some(r.acc_setting)),
        fmt_pct(r.fr),
        fmt_pct(r.wfr),
    ]
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(cells(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn render_aligned(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for line in body {
        for (w, c) in widths.iter_mut().zip(line) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut emit = |cols: Vec<&str>| {
        let mut line = String::new();
        for (i, (c, w)) in cols.iter().zip(&widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                let _ = write!(line, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(line, "  {}{c}", " ".repeat(pad));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    };
    emit(header.to_vec());
    for line in body {
        emit(line.iter().map(String::as_str).collect());
    }
    out
}

/// Aligned plain-text table; adds the clean-minus-setting accuracy drop.
pub fn render_text(rows: &[ReportRow]) -> String {
    let header = ["group", "n", "acc_clean", "acc_setting", "drop", "fr", "wfr"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let [g, n, ac, as_, fr, wfr] = cells(r);
            vec![g, n, ac, as_, fmt_pct(Some(r.acc_drop())), fr, wfr]
        })
        .collect();
    render_aligned(&header, &body)
}

/// One line of the decoding-method comparison: clean accuracy, HalluConv accuracy and
/// flip rate, and WPI accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub decoding: String,
    pub prompt_mode: PromptMode,
    pub acc_clean: f64,
    pub acc_hallu: f64,
    pub fr: Option<f64>,
    pub wpi_acc: Option<f64>,
}

pub fn comparison_rows(report: &[ReportRow], wpi: &[WpiOutcome]) -> Vec<ComparisonRow> {
    let mut wpi_groups: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for w in wpi {
        let e = wpi_groups.entry((w.model.as_str(), w.decoding.as_str())).or_default();
        e.0 += w.score as usize;
        e.1 += 1;
    }
    report
        .iter()
        .filter(|r| r.hallucination_type.is_none() && r.setting == ConvSetting::HalluConv)
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            decoding: r.decoding.clone(),
            prompt_mode: r.prompt_mode,
            acc_clean: r.acc_clean,
            acc_hallu: r.acc_setting,
            fr: r.fr,
            wpi_acc: wpi_groups
                .get(&(r.model.as_str(), r.decoding.as_str()))
                .map(|(hit, n)| *hit as f64 / *n as f64),
        })
        .collect()
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let header = ["model", "decoding", "prompt", "clean_acc", "hallu_acc", "hallu_fr", "wpi_acc"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.decoding.clone(),
                r.prompt_mode.as_str().to_string(),
                fmt_pct(Some(r.acc_clean)),
                fmt_pct(Some(r.acc_hallu)),
                fmt_pct(r.fr),
                fmt_pct(r.wpi_acc),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}
