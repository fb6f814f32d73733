use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use snowball_core::backend::{BackendError, BackendMeta, ModelBackend};
use snowball_core::conversation::{ConvSetting, Conversation, PromptMode};
use snowball_core::decoding::SamplingConfig;
use snowball_core::fixtures::builder_fixture;
use snowball_core::fixtures::sim::{snowball_scenario, synthetic_samples};
use snowball_core::metrics::EvalOutcome;
use snowball_core::record::{serialize_samples, HallucinationType};
use snowball_core::sim::{ContextSignature, FirstRound, ScenarioBackend, ROLE_DISTRACTOR, ROLE_KEY, ROLE_NONE};
use snowball_net::serve;

fn snowball(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snowball")).current_dir(dir).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn lines(path: PathBuf) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

/// A synthetic dataset and its snowballing scenario.
fn workspace(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_samples(n);
    std::fs::write(dir.path().join("data.jsonl"), serialize_samples(&samples)).unwrap();
    std::fs::write(dir.path().join("scenario.json"), snowball_scenario(&samples, true).to_json()).unwrap();
    dir
}

#[test]
fn missing_source_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = snowball(dir.path(), &["build", "--source", "nope.jsonl", "--generator", "scripted:x.json", "--out", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("nope.jsonl"), "{}", text(&out.stderr));
}

#[test]
fn unknown_flags_and_bad_configs_exit_two() {
    let dir = workspace(4);
    assert_eq!(snowball(dir.path(), &["eval", "--frobnicate"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[sampling]\ntop_p = 3.0\n").unwrap();
    let out = snowball(dir.path(), &["eval", "--config", "bad.toml", "--dataset", "data.jsonl", "--scenario", "scenario.json", "--out", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    let out = snowball(dir.path(), &["eval", "--dataset", "data.jsonl", "--chat-url", "http://127.0.0.1:9/v1/chat", "--decoding", "rvd", "--out", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("logits-capable"));
}

#[test]
fn dry_run_counts_without_a_generator() {
    let dir = tempfile::tempdir().unwrap();
    let (raws, _, _) = builder_fixture();
    let raw: String = raws.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(dir.path().join("raw.jsonl"), raw).unwrap();
    let out = snowball(dir.path(), &["build", "--source", "raw.jsonl", "--dry-run"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout).trim(), "planned samples: 10");
}

#[test]
fn config_file_drives_an_evaluation() {
    let dir = workspace(20);
    std::fs::write(
        dir.path().join("run.toml"),
        "dataset = \"data.jsonl\"\nseed = 3\n[backend]\nkind = \"mock\"\nscenario = \"scenario.json\"\n[sampling]\ngreedy = true\n",
    )
    .unwrap();
    let out = snowball(dir.path(), &["eval", "--config", "run.toml", "--out", "out.jsonl"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(lines(dir.path().join("out.jsonl")), 40);
    let out = snowball(dir.path(), &["report", "out.jsonl", "--format", "csv"]);
    let csv = text(&out.stdout);
    assert!(csv.contains("simlvlm/regular/hallu_conv/formatting_prompt/all,20,100.00,0.00,100.00,100.00"), "{csv}");
}

/// Serves `inner` but fails every logits request once `budget` is spent.
struct Flaky {
    inner: ScenarioBackend,
    budget: usize,
    calls: AtomicUsize,
}

impl ModelBackend for Flaky {
    fn meta(&self) -> &BackendMeta {
        self.inner.meta()
    }
    fn logits(&self, c: &Conversation, g: &[u32]) -> Result<Vec<f64>, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(BackendError::Unavailable("worker lost".into()));
        }
        self.inner.logits(c, g)
    }
    fn complete(&self, c: &Conversation, s: &SamplingConfig, n: usize) -> Result<String, BackendError> {
        self.inner.complete(c, s, n)
    }
    fn detokenize(&self, t: &[u32]) -> Result<String, BackendError> {
        self.inner.detokenize(t)
    }
}

#[test]
fn interrupted_run_resumes_from_cache() {
    let dir = workspace(20);
    let scenario = snowball_scenario(&synthetic_samples(20), true);
    let flaky = Flaky { inner: ScenarioBackend::new(scenario.clone()).unwrap(), budget: 30, calls: AtomicUsize::new(0) };
    let server = serve(Arc::new(flaky), "127.0.0.1:0".parse().unwrap()).unwrap();
    let args = |url: &str, out: &str| {
        ["eval", "--dataset", "data.jsonl", "--url", url, "--cache-dir", "cache", "--seed", "5", "--parallelism", "1", "--out", out]
            .map(String::from)
            .to_vec()
    };
    let a: Vec<String> = args(&server.url(), "partial.jsonl");
    let out = snowball(dir.path(), &a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("rerun to resume"));
    let partial = lines(dir.path().join("partial.jsonl"));
    assert!(partial > 0 && partial < 40, "{partial}");
    drop(server);

    let healthy = serve(Arc::new(ScenarioBackend::new(scenario).unwrap()), "127.0.0.1:0".parse().unwrap()).unwrap();
    let b = args(&healthy.url(), "resumed.jsonl");
    let out = snowball(dir.path(), &b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains(&format!("({partial} from cache)")), "{}", text(&out.stderr));

    let fresh = args(&healthy.url(), "fresh.jsonl");
    let mut fresh: Vec<&str> = fresh.iter().map(String::as_str).collect();
    fresh[6] = "cache-fresh";
    assert_eq!(snowball(dir.path(), &fresh).status.code(), Some(0));
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("resumed.jsonl"), read("fresh.jsonl"));
}

fn outcome(id: &str, setting: ConvSetting, pos: u8, neg: u8) -> EvalOutcome {
    EvalOutcome {
        sample_id: id.into(),
        model: "m".into(),
        decoding: "regular".into(),
        setting,
        prompt_mode: PromptMode::QuestionPrompt,
        hallucination_type: HallucinationType::Existence,
        response: String::new(),
        score_pos: pos,
        score_neg: neg,
    }
}

#[test]
fn report_of_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for (id, (cp, cn), (hp, hn)) in
        [("s1", (1, 0), (0, 1)), ("s2", (1, 0), (0, 1)), ("s3", (1, 0), (1, 0)), ("s4", (0, 0), (0, 1))]
    {
        rows.push(outcome(id, ConvSetting::CleanConv, cp, cn));
        rows.push(outcome(id, ConvSetting::HalluConv, hp, hn));
    }
    let body: String = rows.iter().map(|o| serde_json::to_string(o).unwrap() + "\n").collect();
    std::fs::write(dir.path().join("o.jsonl"), body).unwrap();
    let out = snowball(dir.path(), &["report", "o.jsonl", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = text(&out.stdout);
    assert!(csv.contains("m/regular/hallu_conv/question_prompt/all,4,75.00,25.00,66.67,66.67"), "{csv}");

    let hallu_only: String = rows.iter().filter(|o| o.setting == ConvSetting::HalluConv).map(|o| serde_json::to_string(o).unwrap() + "\n").collect();
    std::fs::write(dir.path().join("h.jsonl"), hallu_only).unwrap();
    assert_eq!(snowball(dir.path(), &["report", "h.jsonl"]).status.code(), Some(2));
}

fn wpi_scenario_with(role: &str) -> String {
    let samples = synthetic_samples(20);
    let mut sc = snowball_scenario(&samples, true);
    for b in &mut sc.behaviors {
        if b.signature == ContextSignature::wpi(true, FirstRound::Fact) {
            b.probs = [(role, 0.9), (ROLE_NONE, 0.1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        }
    }
    sc.to_json()
}

#[test]
fn wpi_accuracy_tracks_the_chosen_option() {
    let dir = workspace(20);
    for (role, expect) in [(ROLE_KEY, "100.00"), (ROLE_DISTRACTOR, "0.00")] {
        std::fs::write(dir.path().join("wpi.json"), wpi_scenario_with(role)).unwrap();
        let out = snowball(dir.path(), &["wpi", "--dataset", "data.jsonl", "--scenario", "wpi.json", "--greedy", "--out", "wpi.jsonl"]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        assert!(text(&out.stdout).starts_with(&format!("wpi accuracy {expect} over 20")), "{}", text(&out.stdout));
    }
}

#[test]
fn sweep_writes_one_row_per_beta() {
    let dir = workspace(20);
    let out = snowball(dir.path(), &["sweep", "--dataset", "data.jsonl", "--scenario", "scenario.json", "--greedy", "--betas", "0,1,2", "--out", "sweep.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("beta,hallu_acc,wpi_acc"));
    assert_eq!(csv.lines().count(), 4);
    let out = snowball(dir.path(), &["sweep", "--dataset", "data.jsonl", "--scenario", "scenario.json", "--no-logits", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn conform_subcommand_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let sc = snowball_scenario(&synthetic_samples(4), true);
    let server = serve(Arc::new(ScenarioBackend::new(sc).unwrap()), "127.0.0.1:0".parse().unwrap()).unwrap();
    let out = snowball(dir.path(), &["conform", "--url", &server.url()]);
    let report = text(&out.stdout);
    assert_eq!(report.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 12, "{report}");
    // without a logits-incapable instance the 422 check cannot pass
    assert_eq!(out.status.code(), Some(1));
}
