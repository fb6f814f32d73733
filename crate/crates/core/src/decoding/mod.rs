//! Distribution math, sampling, and the residual visual decoding loop.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;

mod generate;

pub use generate::{generate, regular_generate, rvd_generate, Generation, StepTrace, TopToken};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodingError {
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty distribution")]
    Empty,
    #[error("not a probability distribution: {0}")]
    NotNormalized(String),
    #[error("expected {expected} distribution")]
    WrongKind { expected: &'static str },
    #[error("all probability mass truncated")]
    AllTruncated,
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Backend { step: usize, source: BackendError },
    #[error("step {step}: {context} context returned {got} logits, expected {expected}")]
    VocabDrift { step: usize, context: &'static str, expected: usize, got: usize },
    #[error("backend lacks logits capability")]
    LacksLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Logits,
    Probs,
}

/// Tolerance on the total mass of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// One decoding step's scores over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    values: Vec<f64>,
    kind: DistKind,
}

impl TokenDistribution {
    pub fn logits(values: Vec<f64>) -> Result<Self, DecodingError> {
        if values.is_empty() {
            return Err(DecodingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DecodingError::NonFinite(i));
        }
        Ok(TokenDistribution { values, kind: DistKind::Logits })
    }

    pub fn probs(values: Vec<f64>) -> Result<Self, DecodingError> {
        if values.is_empty() {
            return Err(DecodingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(DecodingError::NotNormalized(format!("entry {i} is {}", values[i])));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(DecodingError::NotNormalized(format!("sums to {sum}")));
        }
        Ok(TokenDistribution { values, kind: DistKind::Probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> DistKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn expect(&self, kind: DistKind) -> Result<(), DecodingError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(DecodingError::WrongKind {
                expected: match kind {
                    DistKind::Logits => "logits",
                    DistKind::Probs => "probs",
                },
            })
        }
    }
}

fn same_size(a: &TokenDistribution, b: &TokenDistribution) -> Result<(), DecodingError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(DecodingError::DimensionMismatch(a.vocab_size(), b.vocab_size()));
    }
    Ok(())
}

/// Max-subtracted softmax over raw values.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax(d: &TokenDistribution) -> Result<TokenDistribution, DecodingError> {
    d.expect(DistKind::Logits)?;
    Ok(TokenDistribution { values: softmax_values(&d.values), kind: DistKind::Probs })
}

/// Jensen-Shannon divergence in bits, so the result lies in [0, 1].
pub fn jsd(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64, DecodingError> {
    p.expect(DistKind::Probs)?;
    q.expect(DistKind::Probs)?;
    same_size(p, q)?;
    let term = |x: f64, m: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&pi, &qi) in p.values.iter().zip(&q.values) {
        let m = 0.5 * (pi + qi);
        // one addition per index keeps the sum exactly symmetric in p and q
        total += term(pi, m) + term(qi, m);
    }
    Ok((0.5 * total).clamp(0.0, 1.0))
}

/// KL(p‖q) in nats, or `None` when p has mass where q has none.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<Option<f64>, DecodingError> {
    p.expect(DistKind::Probs)?;
    q.expect(DistKind::Probs)?;
    same_size(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.values.iter().zip(&q.values) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(None);
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(Some(total.max(0.0)))
}

/// `1 - exp(-KL(p‖q))` plus whether the support condition was violated, in which case
/// the transform's limit 1.0 is returned.
pub fn kld_tau_checked(p: &TokenDistribution, q: &TokenDistribution) -> Result<(f64, bool), DecodingError> {
    Ok(match kl_divergence(p, q)? {
        Some(kl) => (-(-kl).exp_m1(), false),
        None => (1.0, true),
    })
}

pub fn kld_tau(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64, DecodingError> {
    Ok(kld_tau_checked(p, q)?.0)
}

pub fn adaptive_alpha(tau: f64, beta: f64) -> f64 {
    (beta * tau).clamp(0.0, 1.0)
}

/// `alpha * res + (1 - alpha) * full`, elementwise in logit space.
pub fn blend_logits(
    res: &TokenDistribution,
    full: &TokenDistribution,
    alpha: f64,
) -> Result<TokenDistribution, DecodingError> {
    res.expect(DistKind::Logits)?;
    full.expect(DistKind::Logits)?;
    same_size(res, full)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DecodingError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let values = res
        .values
        .iter()
        .zip(&full.values)
        .map(|(r, f)| alpha * r + (1.0 - alpha) * f)
        .collect();
    Ok(TokenDistribution { values, kind: DistKind::Logits })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Jsd,
    Kld,
}

impl Divergence {
    pub fn as_str(self) -> &'static str {
        match self {
            Divergence::Jsd => "jsd",
            Divergence::Kld => "kld",
        }
    }

    /// τ between two distributions, and whether a KL support violation was hit.
    pub fn tau(self, p: &TokenDistribution, q: &TokenDistribution) -> Result<(f64, bool), DecodingError> {
        match self {
            Divergence::Jsd => Ok((jsd(p, q)?, false)),
            Divergence::Kld => kld_tau_checked(p, q),
        }
    }
}

impl FromStr for Divergence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsd" => Ok(Divergence::Jsd),
            "kld" | "kl" => Ok(Divergence::Kld),
            _ => Err(format!("unknown divergence `{s}`")),
        }
    }
}

fn default_temperature() -> f64 {
    1.0
}

fn default_top_p() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 0.95, top_k: None, greedy: false, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        SamplingConfig { greedy: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), DecodingError> {
        if self.greedy {
            return Ok(());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodingError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodingError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(DecodingError::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tokens kept after temperature, top-k and nucleus truncation, with renormalized
/// probabilities, in descending-probability order.
pub fn truncate(probs: &[f64], cfg: &SamplingConfig) -> Result<Vec<(usize, f64)>, DecodingError> {
    cfg.validate()?;
    let tempered: Vec<f64> = if cfg.temperature == 1.0 {
        probs.to_vec()
    } else {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln() / cfg.temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DecodingError::AllTruncated);
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    };
    let mut order: Vec<usize> = (0..tempered.len()).collect();
    order.sort_by(|&a, &b| tempered[b].total_cmp(&tempered[a]).then(a.cmp(&b)));
    if let Some(k) = cfg.top_k {
        order.truncate(k);
    }
    // cumulative sums of floats can land a hair under an exact target
    let target = cfg.top_p - 1e-12;
    let mut cumulative = 0.0;
    let mut keep = 0;
    for &i in &order {
        keep += 1;
        cumulative += tempered[i];
        if cumulative >= target {
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&i| tempered[i]).sum();
    if mass <= 0.0 {
        return Err(DecodingError::AllTruncated);
    }
    Ok(order.into_iter().map(|i| (i, tempered[i] / mass)).collect())
}

pub fn sample_token<R: Rng + ?Sized>(
    d: &TokenDistribution,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<usize, DecodingError> {
    d.expect(DistKind::Probs)?;
    if cfg.greedy {
        return Ok(argmax(&d.values));
    }
    let kept = truncate(&d.values, cfg)?;
    let index = WeightedIndex::new(kept.iter().map(|(_, p)| *p)).map_err(|_| DecodingError::AllTruncated)?;
    Ok(kept[index.sample(rng)].0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvdConfig {
    pub beta: f64,
    pub divergence: Divergence,
    /// Fixed blending weight; disables the divergence computation.
    pub fixed_alpha: Option<f64>,
    pub max_new_tokens: usize,
    pub sampling: SamplingConfig,
}

impl Default for RvdConfig {
    fn default() -> Self {
        RvdConfig {
            beta: 2.0,
            divergence: Divergence::Jsd,
            fixed_alpha: None,
            max_new_tokens: 32,
            sampling: SamplingConfig::default(),
        }
    }
}

impl RvdConfig {
    pub fn validate(&self) -> Result<(), DecodingError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(DecodingError::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(DecodingError::Config(format!("fixed_alpha {a} outside [0, 1]")));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(DecodingError::Config("max_new_tokens must be positive".into()));
        }
        self.sampling.validate()
    }
}

/// How responses are decoded during an evaluation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodingMode {
    #[default]
    Regular,
    Rvd { beta: f64, divergence: Divergence },
    FixedAlpha { alpha: f64 },
}

impl DecodingMode {
    pub fn needs_logits(&self) -> bool {
        !matches!(self, DecodingMode::Regular)
    }

    pub fn rvd_config(&self, sampling: SamplingConfig, max_new_tokens: usize) -> Option<RvdConfig> {
        let base = RvdConfig { max_new_tokens, sampling, ..Default::default() };
        match *self {
            DecodingMode::Regular => None,
            DecodingMode::Rvd { beta, divergence } => Some(RvdConfig { beta, divergence, ..base }),
            DecodingMode::FixedAlpha { alpha } => Some(RvdConfig { fixed_alpha: Some(alpha), ..base }),
        }
    }
}

impl fmt::Display for DecodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodingMode::Regular => f.write_str("regular"),
            DecodingMode::Rvd { beta, divergence } => write!(f, "rvd-{}-b{beta}", divergence.as_str()),
            DecodingMode::FixedAlpha { alpha } => write!(f, "fixed-alpha-{alpha}"),
        }
    }
}

#[cfg(test)]
mod tests;
