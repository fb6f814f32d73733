//! Evaluation runs: conversation settings, WPI probes and β sweeps.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snowball_core::backend::{BackendError, ModelBackend};
use snowball_core::conversation::{build_conversation, ConvSetting, Conversation, Setting};
use snowball_core::decoding::{generate, DecodingError, DecodingMode, Divergence, Generation, SamplingConfig, StepTrace};
use snowball_core::hashing::derive_seed;
use snowball_core::metrics::{accuracy, wpi_score, EvalOutcome, Target, WpiOutcome};
use snowball_core::record::SampleRecord;
use snowball_core::wpi::build_wpi_sample;

use crate::cache::{context_hash, Cache, CacheEntry, CacheKey};
use crate::config::RunConfig;

/// One decoding step of one response, as written to trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub sample_id: String,
    pub setting: String,
    pub decoding: String,
    #[serde(flatten)]
    pub step: StepTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobError {
    pub sample_id: String,
    pub setting: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Run<T> {
    pub outcomes: Vec<T>,
    pub traces: Vec<TraceLine>,
    pub errors: Vec<JobError>,
    pub cache_hits: usize,
    /// Set when a backend failure stopped the run; finished jobs are cached.
    pub aborted: Option<String>,
}

impl<T> Run<T> {
    pub fn clean(&self) -> bool {
        self.errors.is_empty() && self.aborted.is_none()
    }
}

/// Backend failures that make every further request pointless.
fn is_fatal(e: &DecodingError) -> bool {
    match e {
        DecodingError::Backend { source, .. } => {
            source.is_retryable() || matches!(source, BackendError::Schema(_) | BackendError::Config(_))
        }
        DecodingError::VocabDrift { .. } => true,
        _ => false,
    }
}

struct Job<'a> {
    sample: &'a SampleRecord,
    label: String,
    conv: Conversation,
    seed: u64,
}

enum JobResult {
    Done { response: String, trace: Vec<StepTrace>, hit: bool },
    Failed(String),
    Fatal(String),
    Skipped,
}

struct Runner<'a> {
    backend: &'a dyn ModelBackend,
    cfg: &'a RunConfig,
    decoding: DecodingMode,
    cache: Option<&'a Cache>,
    fingerprint: String,
}

impl<'a> Runner<'a> {
    fn new(backend: &'a dyn ModelBackend, cfg: &'a RunConfig, decoding: DecodingMode, cache: Option<&'a Cache>) -> Self {
        let sampling = SamplingConfig { seed: 0, ..cfg.sampling };
        let fingerprint = serde_json::json!({
            "mode": decoding,
            "sampling": sampling,
            "max_new_tokens": cfg.max_new_tokens,
        })
        .to_string();
        Runner { backend, cfg, decoding, cache, fingerprint }
    }

    fn key(&self, job: &Job) -> CacheKey {
        CacheKey {
            sample_id: job.sample.id.clone(),
            setting: job.label.clone(),
            prompt_mode: self.cfg.prompt_mode.as_str().to_string(),
            decoding: self.fingerprint.clone(),
            backend: self.backend.meta().name.clone(),
            seed: job.seed,
            context: context_hash(&job.conv),
        }
    }

    fn run_job(&self, job: &Job, stop: &AtomicBool) -> JobResult {
        let key = self.key(job);
        if let Some(hit) = self.cache.and_then(|c| c.get(&key)) {
            return JobResult::Done { response: hit.response, trace: hit.trace, hit: true };
        }
        if stop.load(Ordering::SeqCst) {
            return JobResult::Skipped;
        }
        let sampling = SamplingConfig { seed: job.seed, ..self.cfg.sampling };
        match generate(self.backend, &job.conv, &self.decoding, &sampling, self.cfg.max_new_tokens) {
            Ok(Generation { text, trace, .. }) => {
                if let Some(cache) = self.cache {
                    let entry = CacheEntry { key, response: text.clone(), trace: trace.clone() };
                    if let Err(e) = cache.put(&entry) {
                        return JobResult::Failed(format!("cache write failed: {e}"));
                    }
                }
                JobResult::Done { response: text, trace, hit: false }
            }
            Err(e) if is_fatal(&e) => {
                stop.store(true, Ordering::SeqCst);
                JobResult::Fatal(e.to_string())
            }
            Err(e) => JobResult::Failed(e.to_string()),
        }
    }

    /// Runs `jobs` on at most `parallelism` threads; results come back in job order.
    fn run_all<T>(&self, jobs: Vec<Job>, mut finish: impl FnMut(&Job, String) -> T) -> Run<T> {
        let stop = AtomicBool::new(false);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.parallelism.max(1))
            .build()
            .expect("thread pool");
        let results: Vec<JobResult> = pool.install(|| jobs.par_iter().map(|j| self.run_job(j, &stop)).collect());
        let mut run = Run { outcomes: Vec::new(), traces: Vec::new(), errors: Vec::new(), cache_hits: 0, aborted: None };
        let decoding = self.decoding.to_string();
        for (job, result) in jobs.iter().zip(results) {
            match result {
                JobResult::Done { response, trace, hit } => {
                    run.cache_hits += hit as usize;
                    run.traces.extend(trace.into_iter().map(|step| TraceLine {
                        sample_id: job.sample.id.clone(),
                        setting: job.label.clone(),
                        decoding: decoding.clone(),
                        step,
                    }));
                    run.outcomes.push(finish(job, response));
                }
                JobResult::Failed(message) => run.errors.push(JobError {
                    sample_id: job.sample.id.clone(),
                    setting: job.label.clone(),
                    message,
                }),
                JobResult::Fatal(message) => {
                    if run.aborted.is_none() {
                        run.aborted = Some(format!("{} / {}: {message}", job.sample.id, job.label));
                    }
                }
                JobResult::Skipped => {}
            }
        }
        run
    }

    fn model_label(&self) -> String {
        self.cfg.model.clone().unwrap_or_else(|| self.backend.meta().name.clone())
    }
}

/// Evaluates every sample under every configured setting, settings outermost.
pub fn run_eval(
    samples: &[SampleRecord],
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    cache: Option<&Cache>,
) -> Run<EvalOutcome> {
    run_eval_with(samples, backend, cfg, cfg.decoding, &cfg.settings, cache)
}

fn run_eval_with(
    samples: &[SampleRecord],
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    decoding: DecodingMode,
    settings: &[ConvSetting],
    cache: Option<&Cache>,
) -> Run<EvalOutcome> {
    let runner = Runner::new(backend, cfg, decoding, cache);
    let mut jobs = Vec::new();
    let mut early = Vec::new();
    for &setting in settings {
        for sample in samples {
            let label = setting.as_str().to_string();
            match build_conversation(sample, Setting::new(setting, cfg.prompt_mode)) {
                Ok(conv) => {
                    let seed = derive_seed(cfg.seed, "sampling", &format!("{}/{label}", sample.id));
                    jobs.push(Job { sample, label, conv, seed });
                }
                Err(e) => early.push(JobError { sample_id: sample.id.clone(), setting: label, message: e.to_string() }),
            }
        }
    }
    let model = runner.model_label();
    let decoding_label = decoding.to_string();
    let mut run = runner.run_all(jobs, |job, response| {
        let setting = settings_by_label(&job.label);
        EvalOutcome::scored(job.sample, &model, &decoding_label, setting, cfg.prompt_mode, response, cfg.match_mode)
    });
    early.append(&mut run.errors);
    run.errors = early;
    run
}

fn settings_by_label(label: &str) -> ConvSetting {
    ConvSetting::ALL.into_iter().find(|s| s.as_str() == label).expect("job labels come from settings")
}

/// Builds one seeded WPI probe per sample and scores the responses.
pub fn run_wpi(
    samples: &[SampleRecord],
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    cache: Option<&Cache>,
) -> Run<WpiOutcome> {
    run_wpi_with(samples, backend, cfg, cfg.decoding, cache)
}

fn run_wpi_with(
    samples: &[SampleRecord],
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    decoding: DecodingMode,
    cache: Option<&Cache>,
) -> Run<WpiOutcome> {
    let runner = Runner::new(backend, cfg, decoding, cache);
    let mut jobs = Vec::new();
    let mut probes = Vec::new();
    let mut early = Vec::new();
    for sample in samples {
        match build_wpi_sample(sample, derive_seed(cfg.seed, "wpi", &sample.id)) {
            Ok((wpi, conv)) => {
                let seed = derive_seed(cfg.seed, "sampling", &format!("{}/wpi", sample.id));
                probes.push(wpi);
                jobs.push(Job { sample, label: "wpi".into(), conv, seed });
            }
            Err(e) => early.push(JobError { sample_id: sample.id.clone(), setting: "wpi".into(), message: e.to_string() }),
        }
    }
    let model = runner.model_label();
    let decoding_label = decoding.to_string();
    let index: std::collections::HashMap<&str, usize> =
        jobs.iter().enumerate().map(|(i, j)| (j.sample.id.as_str(), i)).collect();
    let mut run = runner.run_all(jobs, |job, response| {
        let wpi = &probes[index[job.sample.id.as_str()]];
        WpiOutcome {
            sample_id: job.sample.id.clone(),
            model: model.clone(),
            decoding: decoding_label.clone(),
            score: wpi_score(&response, wpi),
            response,
            correct_label: wpi.correct_label,
        }
    });
    early.append(&mut run.errors);
    run.errors = early;
    run
}

pub fn wpi_accuracy(outcomes: &[WpiOutcome]) -> Option<f64> {
    (!outcomes.is_empty()).then(|| outcomes.iter().map(|o| o.score as f64).sum::<f64>() / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub hallu_acc: f64,
    pub wpi_acc: f64,
}

#[derive(Debug, Default)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub traces: Vec<TraceLine>,
    pub errors: Vec<JobError>,
    pub aborted: Option<String>,
}

pub const DEFAULT_BETAS: [f64; 7] = [0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0];

/// For each β, HalluConv accuracy and WPI accuracy under RVD.
pub fn run_sweep(
    samples: &[SampleRecord],
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    betas: &[f64],
    divergence: Divergence,
    cache: Option<&Cache>,
) -> Sweep {
    let mut sweep = Sweep::default();
    for &beta in betas {
        let mode = DecodingMode::Rvd { beta, divergence };
        let mut hallu = run_eval_with(samples, backend, cfg, mode, &[ConvSetting::HalluConv], cache);
        let mut wpi = run_wpi_with(samples, backend, cfg, mode, cache);
        sweep.errors.append(&mut hallu.errors);
        sweep.errors.append(&mut wpi.errors);
        sweep.traces.append(&mut hallu.traces);
        sweep.traces.append(&mut wpi.traces);
        if let Some(a) = hallu.aborted.or(wpi.aborted) {
            sweep.aborted = Some(a);
            break;
        }
        let (Ok(hallu_acc), Some(wpi_acc)) = (accuracy(&hallu.outcomes, Target::Pos), wpi_accuracy(&wpi.outcomes)) else {
            sweep.aborted = Some(format!("no outcomes at beta {beta}"));
            break;
        };
        sweep.rows.push(SweepRow { beta, hallu_acc, wpi_acc });
    }
    sweep
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,hallu_acc,wpi_acc\n");
    for r in rows {
        out.push_str(&format!("{:.2},{:.2},{:.2}\n", r.beta, r.hallu_acc * 100.0, r.wpi_acc * 100.0));
    }
    out
}

/// Newline-delimited JSON, one record per line.
pub fn to_ndjson<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_ndjson<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}
