use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::backend::ModelBackend;
use crate::conversation::Conversation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopToken {
    pub token: u32,
    pub prob: f64,
}

/// Per-step record of a decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Absent when no divergence was computed (no history, or a fixed alpha).
    pub tau: Option<f64>,
    pub alpha: f64,
    pub chosen_token: u32,
    pub top_full: Vec<TopToken>,
    pub top_residual: Vec<TopToken>,
    pub top_query: Vec<TopToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// Emitted token ids, including a final end-of-sequence token if one was sampled.
    pub tokens: Vec<u32>,
    pub trace: Vec<StepTrace>,
    /// Steps where the KL variant hit a support violation and τ was set to 1.
    pub support_violations: usize,
}

fn top5(probs: &[f64]) -> Vec<TopToken> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(5)
        .map(|i| TopToken { token: i as u32, prob: probs[i] })
        .collect()
}

struct Session<'a> {
    backend: &'a dyn ModelBackend,
    vocab: usize,
    eos: u32,
}

impl Session<'_> {
    fn new(backend: &dyn ModelBackend) -> Session<'_> {
        let meta = backend.meta();
        Session { backend, vocab: meta.vocab_size, eos: meta.eos_token_id }
    }

    fn logits(
        &self,
        step: usize,
        context: &'static str,
        conv: &Conversation,
        generated: &[u32],
    ) -> Result<TokenDistribution, DecodingError> {
        let values = self
            .backend
            .logits(conv, generated)
            .map_err(|source| DecodingError::Backend { step, source })?;
        if values.len() != self.vocab {
            return Err(DecodingError::VocabDrift { step, context, expected: self.vocab, got: values.len() });
        }
        TokenDistribution::logits(values)
    }

    fn finish(&self, tokens: Vec<u32>, trace: Vec<StepTrace>, support_violations: usize) -> Result<Generation, DecodingError> {
        let body: Vec<u32> = tokens.iter().copied().filter(|&t| t != self.eos).collect();
        let text = self
            .backend
            .detokenize(&body)
            .map_err(|source| DecodingError::Backend { step: tokens.len(), source })?;
        Ok(Generation { text, tokens, trace, support_violations })
    }
}

fn require_logits(backend: &dyn ModelBackend) -> Result<(), DecodingError> {
    if backend.meta().capabilities.logits {
        Ok(())
    } else {
        Err(DecodingError::LacksLogits)
    }
}

/// Plain autoregressive decoding on the full context.
pub fn regular_generate(
    backend: &dyn ModelBackend,
    conv: &Conversation,
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<Generation, DecodingError> {
    require_logits(backend)?;
    sampling.validate()?;
    let session = Session::new(backend);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    for step in 0..max_new_tokens {
        let full = session.logits(step, "full", conv, &tokens)?;
        let probs = softmax(&full)?;
        let token = sample_token(&probs, sampling, &mut rng)? as u32;
        trace.push(StepTrace {
            step,
            tau: None,
            alpha: 0.0,
            chosen_token: token,
            top_full: top5(probs.values()),
            top_residual: Vec::new(),
            top_query: Vec::new(),
        });
        tokens.push(token);
        if token == session.eos {
            break;
        }
    }
    session.finish(tokens, trace, 0)
}

/// Residual visual decoding.
///
/// Each step scores the full context, the image plus current query, and the query
/// alone. The divergence between the last two sets α, and the next token is drawn from
/// the blend of residual and full logits. Without dialog history this is exactly
/// [`regular_generate`].
pub fn rvd_generate(
    backend: &dyn ModelBackend,
    conv: &Conversation,
    cfg: &RvdConfig,
) -> Result<Generation, DecodingError> {
    require_logits(backend)?;
    cfg.validate()?;
    if !conv.has_history() {
        return regular_generate(backend, conv, &cfg.sampling, cfg.max_new_tokens);
    }
    let session = Session::new(backend);
    let residual = conv.residual();
    let query_only = conv.query_only();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed);
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    let mut violations = 0;
    for step in 0..cfg.max_new_tokens {
        let full = session.logits(step, "full", conv, &tokens)?;
        let res = session.logits(step, "residual", &residual, &tokens)?;
        let res_probs = softmax(&res)?;
        let (tau, alpha, top_query) = match cfg.fixed_alpha {
            Some(a) => (None, a, Vec::new()),
            None => {
                let query = session.logits(step, "query", &query_only, &tokens)?;
                let query_probs = softmax(&query)?;
                let (tau, violated) = cfg.divergence.tau(&res_probs, &query_probs)?;
                violations += violated as usize;
                (Some(tau), adaptive_alpha(tau, cfg.beta), top5(query_probs.values()))
            }
        };
        let full_probs = softmax(&full)?;
        let probs = softmax(&blend_logits(&res, &full, alpha)?)?;
        let token = sample_token(&probs, &cfg.sampling, &mut rng)? as u32;
        trace.push(StepTrace {
            step,
            tau,
            alpha,
            chosen_token: token,
            top_full: top5(full_probs.values()),
            top_residual: top5(res_probs.values()),
            top_query,
        });
        tokens.push(token);
        if token == session.eos {
            break;
        }
    }
    session.finish(tokens, trace, violations)
}

/// Decodes `conv` under `mode`. Regular decoding on a backend without logits goes
/// through its chat completion instead and carries no trace.
pub fn generate(
    backend: &dyn ModelBackend,
    conv: &Conversation,
    mode: &DecodingMode,
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<Generation, DecodingError> {
    match mode.rvd_config(*sampling, max_new_tokens) {
        Some(cfg) => rvd_generate(backend, conv, &cfg),
        None if backend.meta().capabilities.logits => regular_generate(backend, conv, sampling, max_new_tokens),
        None => {
            let text = backend
                .complete(conv, sampling, max_new_tokens)
                .map_err(|source| DecodingError::Backend { step: 0, source })?;
            Ok(Generation { text, tokens: Vec::new(), trace: Vec::new(), support_violations: 0 })
        }
    }
}
