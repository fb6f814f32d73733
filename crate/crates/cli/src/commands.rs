//! Subcommand definitions and handlers.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use snowball_core::builder::{build_dataset, parse_raw_records, BuildConfig};
use snowball_core::decoding::Divergence;
use snowball_core::generator::{GenBackend, ScriptedMock};
use snowball_core::metrics::{aggregate_report, comparison_rows, render_comparison, render_csv, render_text, EvalOutcome, WpiOutcome};
use snowball_core::record::{read_samples, serialize_samples, SampleRecord};
use snowball_core::sim::synth::snowball_scenario;
use snowball_core::sim::{Scenario, ScenarioBackend};
use snowball_net::{run_conformance, serve, ConformanceTarget, RemoteGenerator};

use crate::cache::Cache;
use crate::config::{open_backend, read_config_file, resolve, RunConfig};
use crate::eval::*;
use crate::UsageError;

/// Hallucination-snowballing harness.
#[derive(Debug, Parser)]
#[command(name = "snowball", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Curate a dataset from raw question records with a generator.
    Build(BuildArgs),
    /// Evaluate a dataset under conversation settings.
    Eval(EvalArgs),
    /// Aggregate outcome files into accuracy and flip-rate tables.
    Report(ReportArgs),
    /// Run the "who provides this image" probe.
    Wpi(WpiArgs),
    /// Serve a scenario file over the backend protocol.
    ServeMock(ServeArgs),
    /// HalluConv and WPI accuracy across RVD strengths.
    Sweep(SweepArgs),
    /// Write a snowballing mock scenario for a dataset.
    Scenario(ScenarioArgs),
    /// Run the protocol conformance checks against a server.
    Conform(ConformArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Raw records, one JSON object per line.
    #[arg(long)]
    pub source: PathBuf,
    /// `scripted:FILE` (fingerprint-to-response JSON) or `remote:URL` (chat endpoint).
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long, default_value = "curator")]
    pub generator_model: String,
    /// Environment variable holding the remote generator's bearer token.
    #[arg(long)]
    pub generator_auth_env: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stats sidecar; defaults to OUT with a `.stats.json` suffix.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Print the planned sample count without calling the generator.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Regular,
    Rvd,
    FixedAlpha,
}

/// Flags mirroring the run configuration. Unset flags fall back to defaults; a config
/// file overrides anything given here.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Scenario file for the in-process simulated model.
    #[arg(long, group = "backend")]
    pub scenario: Option<PathBuf>,
    /// Base URL of a protocol server.
    #[arg(long, group = "backend")]
    pub url: Option<String>,
    /// Chat-completion endpoint of a completion-only model.
    #[arg(long, group = "backend")]
    pub chat_url: Option<String>,
    #[arg(long, default_value = "SNOWBALL_CHAT_TOKEN")]
    pub auth_env: String,
    #[arg(long, default_value = "chat-model")]
    pub chat_model: String,
    /// Serve the scenario without the logits capability.
    #[arg(long)]
    pub no_logits: bool,
    /// Comma-separated: clean_conv, hallu_conv, fact_conv, irr_conv.
    #[arg(long, value_delimiter = ',')]
    pub settings: Vec<String>,
    /// question_prompt or formatting_prompt.
    #[arg(long)]
    pub prompt_mode: Option<String>,
    #[arg(long, value_enum)]
    pub decoding: Option<ModeArg>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// jsd or kld.
    #[arg(long)]
    pub divergence: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub greedy: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model label for outcome records.
    #[arg(long)]
    pub model: Option<String>,
    /// word_boundary or substring.
    #[arg(long)]
    pub match_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step decoding traces, one JSON object per line.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WpiArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
    pub betas: Vec<f64>,
    #[arg(long = "sweep-divergence", default_value = "jsd")]
    pub sweep_divergence: String,
    /// CSV of beta, HalluConv accuracy and WPI accuracy (percent).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Outcome files from `eval`.
    #[arg(required = true)]
    pub outcomes: Vec<PathBuf>,
    /// Outcome files from `wpi`, for the comparison table.
    #[arg(long)]
    pub wpi: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 8077)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub no_logits: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave out the WPI behaviors.
    #[arg(long)]
    pub no_wpi: bool,
}

#[derive(Debug, Args)]
pub struct ConformArgs {
    #[arg(long)]
    pub url: String,
    /// A logits-incapable instance of the same server, for the capability error check.
    #[arg(long)]
    pub no_logits_url: Option<String>,
}

/// Exit status: 0 success, 1 evaluation errors (partial results kept).
pub type Status = u8;

pub fn dispatch(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Wpi(a) => cmd_wpi(a),
        Command::ServeMock(a) => cmd_serve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Scenario(a) => cmd_scenario(a),
        Command::Conform(a) => cmd_conform(a),
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_existing(path: &Path, what: &str) -> Result<String, UsageError> {
    fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {what} {}: {e}", path.display())))
}

fn open_generator(spec: &str, args: &BuildArgs) -> Result<Arc<dyn GenBackend>, UsageError> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let text = read_existing(Path::new(path), "generator script")?;
        let mock = ScriptedMock::from_json(&text).map_err(|e| UsageError(format!("invalid generator script {path}: {e}")))?;
        Ok(Arc::new(mock))
    } else if let Some(url) = spec.strip_prefix("remote:") {
        let g = RemoteGenerator::new(url, &args.generator_model, args.generator_auth_env.as_deref())
            .map_err(|e| UsageError(e.to_string()))?;
        Ok(Arc::new(g))
    } else {
        Err(UsageError(format!("generator must be scripted:FILE or remote:URL, got {spec}")))
    }
}

fn cmd_build(a: BuildArgs) -> anyhow::Result<Status> {
    if !a.source.is_file() {
        return Err(UsageError(format!("source file not found: {}", a.source.display())).into());
    }
    let text = read_existing(&a.source, "source")?;
    let raws = parse_raw_records(&text)
        .map_err(|(line, e)| UsageError(format!("{}:{line}: {e}", a.source.display())))?;
    if a.dry_run {
        println!("planned samples: {}", raws.len());
        return Ok(0);
    }
    let spec = a.generator.as_deref().ok_or_else(|| UsageError("--generator is required".into()))?;
    let out = a.out.clone().ok_or_else(|| UsageError("--out is required".into()))?;
    let generator = open_generator(spec, &a)?;
    let cfg = BuildConfig { parallelism: a.parallelism, ..Default::default() };
    let built = build_dataset(&raws, &cfg, generator.as_ref()).context("dataset build aborted")?;
    write(&out, &serialize_samples(&built.samples))?;
    let stats = a.stats.clone().unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".stats.json");
        PathBuf::from(s)
    });
    write(&stats, &(serde_json::to_string_pretty(&built.stats)? + "\n"))?;
    for f in &built.stats.failures {
        log::warn!("dropped {}: {:?} ({})", f.id, f.reason, f.detail);
    }
    eprintln!("kept {} of {} records -> {}", built.stats.kept, built.stats.input, out.display());
    Ok(0)
}

fn set(t: &mut toml::Table, key: &str, v: impl Into<toml::Value>) {
    t.insert(key.to_string(), v.into());
}

/// Flag values as a configuration table; unset flags are left out.
pub fn flags_table(a: &RunArgs) -> Result<toml::Table, UsageError> {
    let mut t = toml::Table::new();
    if let Some(d) = &a.dataset {
        set(&mut t, "dataset", d.display().to_string());
    }
    let mut backend = toml::Table::new();
    if let Some(s) = &a.scenario {
        set(&mut backend, "kind", "mock");
        set(&mut backend, "scenario", s.display().to_string());
        set(&mut backend, "no_logits", a.no_logits);
    } else if let Some(u) = &a.url {
        set(&mut backend, "kind", "remote");
        set(&mut backend, "url", u.as_str());
    } else if let Some(u) = &a.chat_url {
        set(&mut backend, "kind", "chat");
        set(&mut backend, "url", u.as_str());
        set(&mut backend, "auth_env", a.auth_env.as_str());
        set(&mut backend, "model", a.chat_model.as_str());
    }
    if !backend.is_empty() {
        set(&mut t, "backend", backend);
    }
    if !a.settings.is_empty() {
        let list: Vec<toml::Value> = a.settings.iter().map(|s| toml::Value::from(s.trim())).collect();
        set(&mut t, "settings", list);
    }
    if let Some(p) = &a.prompt_mode {
        set(&mut t, "prompt_mode", p.as_str());
    }
    let mut decoding = toml::Table::new();
    match a.decoding {
        Some(ModeArg::Regular) => set(&mut decoding, "mode", "regular"),
        Some(ModeArg::Rvd) => {
            set(&mut decoding, "mode", "rvd");
            set(&mut decoding, "beta", a.beta.unwrap_or(2.0));
            set(&mut decoding, "divergence", a.divergence.as_deref().unwrap_or("jsd"));
        }
        Some(ModeArg::FixedAlpha) => {
            let alpha = a.alpha.ok_or_else(|| UsageError("--decoding fixed-alpha needs --alpha".into()))?;
            set(&mut decoding, "mode", "fixed_alpha");
            set(&mut decoding, "alpha", alpha);
        }
        None => {}
    }
    if !decoding.is_empty() {
        set(&mut t, "decoding", decoding);
    }
    let mut sampling = toml::Table::new();
    if a.greedy {
        set(&mut sampling, "greedy", true);
    }
    if let Some(v) = a.temperature {
        set(&mut sampling, "temperature", v);
    }
    if let Some(v) = a.top_p {
        set(&mut sampling, "top_p", v);
    }
    if let Some(v) = a.top_k {
        set(&mut sampling, "top_k", v as i64);
    }
    if !sampling.is_empty() {
        set(&mut t, "sampling", sampling);
    }
    if let Some(v) = a.max_new_tokens {
        set(&mut t, "max_new_tokens", v as i64);
    }
    if let Some(v) = &a.cache_dir {
        set(&mut t, "cache_dir", v.display().to_string());
    }
    if let Some(v) = a.parallelism {
        set(&mut t, "parallelism", v as i64);
    }
    if let Some(v) = a.seed {
        let v = i64::try_from(v).map_err(|_| UsageError("--seed must fit in 63 bits".into()))?;
        set(&mut t, "seed", v);
    }
    if let Some(v) = &a.model {
        set(&mut t, "model", v.as_str());
    }
    if let Some(v) = &a.match_mode {
        set(&mut t, "match_mode", v.as_str());
    }
    Ok(t)
}

pub fn run_config(a: &RunArgs) -> Result<RunConfig, UsageError> {
    let file = a.config.as_deref().map(read_config_file).transpose()?;
    resolve(flags_table(a)?, file)
}

fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>, UsageError> {
    if !path.is_file() {
        return Err(UsageError(format!("dataset not found: {}", path.display())));
    }
    read_samples(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

fn open_cache(cfg: &RunConfig) -> Result<Option<Cache>, UsageError> {
    cfg.cache_dir
        .as_deref()
        .map(|d| Cache::open(d).map_err(|e| UsageError(format!("cannot open cache {}: {e}", d.display()))))
        .transpose()
}

/// Logs per-sample errors and the abort reason; returns the exit status.
fn summarize(errors: &[JobError], aborted: &Option<String>) -> Status {
    for e in errors {
        log::error!("{} / {}: {}", e.sample_id, e.setting, e.message);
    }
    if let Some(reason) = aborted {
        eprintln!("aborted: {reason}; finished responses are cached, rerun to resume");
    }
    if errors.is_empty() && aborted.is_none() {
        0
    } else {
        eprintln!("{} sample errors", errors.len());
        1
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<Status> {
    let cfg = run_config(&a.run)?;
    let samples = load_dataset(&cfg.dataset)?;
    let backend = open_backend(&cfg.backend)?;
    let cache = open_cache(&cfg)?;
    let run = run_eval(&samples, backend.as_ref(), &cfg, cache.as_ref());
    write(&a.out, &to_ndjson(&run.outcomes))?;
    if let Some(p) = &a.trace_out {
        write(p, &to_ndjson(&run.traces))?;
    }
    eprintln!("{} outcomes ({} from cache) -> {}", run.outcomes.len(), run.cache_hits, a.out.display());
    Ok(summarize(&run.errors, &run.aborted))
}

fn cmd_wpi(a: WpiArgs) -> anyhow::Result<Status> {
    let cfg = run_config(&a.run)?;
    let samples = load_dataset(&cfg.dataset)?;
    let backend = open_backend(&cfg.backend)?;
    let cache = open_cache(&cfg)?;
    let run = run_wpi(&samples, backend.as_ref(), &cfg, cache.as_ref());
    write(&a.out, &to_ndjson(&run.outcomes))?;
    if let Some(p) = &a.trace_out {
        write(p, &to_ndjson(&run.traces))?;
    }
    match wpi_accuracy(&run.outcomes) {
        Some(acc) => println!("wpi accuracy {:.2} over {} samples (competence bar 90.00)", acc * 100.0, run.outcomes.len()),
        None => println!("wpi accuracy — (no outcomes)"),
    }
    Ok(summarize(&run.errors, &run.aborted))
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<Status> {
    let cfg = run_config(&a.run)?;
    let divergence: Divergence = a.sweep_divergence.parse().map_err(UsageError)?;
    let samples = load_dataset(&cfg.dataset)?;
    let backend = open_backend(&cfg.backend)?;
    if !backend.meta().capabilities.logits {
        return Err(UsageError("sweep needs a logits-capable backend".into()).into());
    }
    let cache = open_cache(&cfg)?;
    let sweep = run_sweep(&samples, backend.as_ref(), &cfg, &a.betas, divergence, cache.as_ref());
    let table = render_sweep(&sweep.rows);
    write(&a.out, &table)?;
    if let Some(p) = &a.trace_out {
        write(p, &to_ndjson(&sweep.traces))?;
    }
    print!("{table}");
    Ok(summarize(&sweep.errors, &sweep.aborted))
}

fn read_outcomes<T: for<'de> serde::Deserialize<'de>>(paths: &[PathBuf]) -> Result<Vec<T>, UsageError> {
    let mut all = Vec::new();
    for p in paths {
        let text = read_existing(p, "outcomes")?;
        let mut items = from_ndjson(&text).map_err(|(line, e)| UsageError(format!("{}:{line}: {e}", p.display())))?;
        all.append(&mut items);
    }
    Ok(all)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<Status> {
    let outcomes: Vec<EvalOutcome> = read_outcomes(&a.outcomes)?;
    let wpi: Vec<WpiOutcome> = read_outcomes(&a.wpi)?;
    let rows = aggregate_report(&outcomes).map_err(|e| UsageError(e.to_string()))?;
    let mut text = match a.format {
        Format::Text => render_text(&rows),
        Format::Csv => render_csv(&rows),
    };
    if !wpi.is_empty() {
        text.push('\n');
        text.push_str(&render_comparison(&comparison_rows(&rows, &wpi)));
    }
    match &a.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<Status> {
    let text = read_existing(&a.scenario, "scenario")?;
    let scenario = Scenario::from_json(&text).map_err(|e| UsageError(format!("{}: {e}", a.scenario.display())))?;
    let caps = snowball_core::backend::Capabilities { logits: !a.no_logits, complete: true };
    let backend = ScenarioBackend::with_capabilities(scenario, caps).map_err(|e| UsageError(e.to_string()))?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| UsageError(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let server = serve(Arc::new(backend), addr).with_context(|| format!("cannot listen on {addr}"))?;
    println!("listening on {}", server.url());
    server.wait();
    Ok(0)
}

fn cmd_scenario(a: ScenarioArgs) -> anyhow::Result<Status> {
    let samples = load_dataset(&a.dataset)?;
    let scenario = snowball_scenario(&samples, !a.no_wpi);
    write(&a.out, &(scenario.to_json() + "\n"))?;
    eprintln!("scenario for {} samples, vocab {} -> {}", samples.len(), scenario.vocab.len(), a.out.display());
    Ok(0)
}

fn cmd_conform(a: ConformArgs) -> anyhow::Result<Status> {
    let report = run_conformance(&ConformanceTarget { base_url: a.url, no_logits_url: a.no_logits_url });
    println!("{report}");
    Ok(if report.passed() { 0 } else { 1 })
}
