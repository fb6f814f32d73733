//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero when any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use snowball_cli::config::{BackendSpec, RunConfig};
use snowball_cli::eval::{run_eval, run_sweep, DEFAULT_BETAS};
use snowball_core::backend::{Capabilities, ModelBackend};
use snowball_core::builder::{build_dataset, BuildConfig};
use snowball_core::conversation::{build_conversation, ConvSetting, PromptMode, Setting};
use snowball_core::decoding::*;
use snowball_core::fixtures::builder_fixture;
use snowball_core::fixtures::sim::{query_mix, snowball_scenario, synthetic_samples, FILLERS, MAJOR};
use snowball_core::fixtures::Fate;
use snowball_core::hashing::derive_seed;
use snowball_core::metrics::{accuracy, flip_rate, weak_flip_rate, EvalOutcome, Target};
use snowball_core::record::{serialize_samples, HallucinationType};
use snowball_core::sim::ScenarioBackend;
use snowball_core::wpi::{build_wpi_sample, is_six_digits, key_sentence, split_sentences, LABELS, NONE_OPTION};
use snowball_net::{run_conformance, serve, ConformanceTarget};

type Check = Result<String, String>;

/// (numerator, denominator) of a rate; `None` when D⁺ is empty.
type Fraction = Option<(usize, usize)>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario_backend(n: usize, wpi: bool) -> (Vec<snowball_core::record::SampleRecord>, ScenarioBackend) {
    let samples = synthetic_samples(n);
    let backend = ScenarioBackend::new(snowball_scenario(&samples, wpi)).unwrap();
    (samples, backend)
}

fn greedy_config() -> RunConfig {
    let mut cfg = RunConfig::new("unused".into(), BackendSpec::Mock { scenario: "unused".into(), no_logits: false });
    cfg.settings = vec![ConvSetting::CleanConv, ConvSetting::HalluConv];
    cfg.sampling = SamplingConfig::greedy();
    cfg.max_new_tokens = 8;
    cfg
}

fn split(outcomes: &[EvalOutcome]) -> (Vec<EvalOutcome>, Vec<EvalOutcome>) {
    let pick = |s| outcomes.iter().filter(|o| o.setting == s).cloned().collect::<Vec<_>>();
    (pick(ConvSetting::CleanConv), pick(ConvSetting::HalluConv))
}

// ---- metrics ----

fn outcome(id: String, setting: ConvSetting, pos: u8, neg: u8) -> EvalOutcome {
    EvalOutcome {
        sample_id: id,
        model: "m".into(),
        decoding: "regular".into(),
        setting,
        prompt_mode: PromptMode::FormattingPrompt,
        hallucination_type: HallucinationType::Relation,
        response: String::new(),
        score_pos: pos,
        score_neg: neg,
    }
}

/// FR and WFR as exact fractions, pairing each clean outcome with its setting outcome by
/// scanning the whole list.
fn flip_oracle(clean: &[EvalOutcome], hallu: &[EvalOutcome]) -> (Fraction, Fraction) {
    let (mut d, mut f, mut w) = (0, 0, 0);
    for c in clean {
        let matches: Vec<_> = hallu.iter().filter(|h| h.sample_id == c.sample_id).collect();
        assert_eq!(matches.len(), 1);
        if c.score_pos == 1 {
            d += 1;
            if matches[0].score_neg == 1 {
                f += 1;
            }
            if matches[0].score_pos == 0 {
                w += 1;
            }
        }
    }
    if d == 0 {
        (None, None)
    } else {
        (Some((f, d)), Some((w, d)))
    }
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.random_range(1..=12);
        let clean: Vec<_> = (0..n)
            .map(|i| outcome(format!("c{case}-{i}"), ConvSetting::CleanConv, rng.random_range(0..2), rng.random_range(0..2)))
            .collect();
        let mut hallu: Vec<_> = (0..n)
            .map(|i| outcome(format!("c{case}-{i}"), ConvSetting::HalluConv, rng.random_range(0..2), rng.random_range(0..2)))
            .collect();
        hallu.shuffle(&mut rng);
        let (fr, wfr) = flip_oracle(&clean, &hallu);
        let as_rate = |r: Fraction| r.map(|(a, b)| a as f64 / b as f64);
        let got = (flip_rate(&clean, &hallu).unwrap(), weak_flip_rate(&clean, &hallu).unwrap());
        ensure(got == (as_rate(fr), as_rate(wfr)), || format!("case {case}: {got:?} vs {fr:?} {wfr:?}"))?;
    }
    let clean: Vec<_> = [(1, 0), (1, 0), (1, 0), (0, 0)]
        .iter()
        .enumerate()
        .map(|(i, &(p, n))| outcome(format!("h{i}"), ConvSetting::CleanConv, p, n))
        .collect();
    let hallu: Vec<_> = [(0, 1), (0, 1), (1, 0), (0, 1)]
        .iter()
        .enumerate()
        .map(|(i, &(p, n))| outcome(format!("h{i}"), ConvSetting::HalluConv, p, n))
        .collect();
    let hand = (flip_rate(&clean, &hallu).unwrap(), weak_flip_rate(&clean, &hallu).unwrap());
    ensure(hand == (Some(2.0 / 3.0), Some(2.0 / 3.0)), || format!("hand fixture gave {hand:?}"))?;
    Ok("1000 random sets exact, hand fixture FR = WFR = 2/3".into())
}

// ---- distribution math ----

/// Double-double oracle. twofloat's addition and multiplication carry about 106 bits;
/// its division, exp and ln are only good to f64 precision or worse, so those three are
/// rebuilt here from the exact operations.
mod dd {
    use twofloat::{consts::LN_2, TwoFloat};

    pub fn f(x: f64) -> TwoFloat {
        TwoFloat::from(x)
    }

    /// Long division with two correction terms.
    pub fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
        let q1 = a.hi() / b.hi();
        let r = a - b * f(q1);
        let q2 = r.hi() / b.hi();
        let r = r - b * f(q2);
        let q3 = r.hi() / b.hi();
        f(q1) + f(q2) + f(q3)
    }

    /// Range reduction by ln 2 and 2^-10, a Taylor series, then ten squarings.
    pub fn exp(x: TwoFloat) -> TwoFloat {
        let k = (x.hi() / LN_2.hi()).round();
        let r = (x - LN_2 * f(k)) * f(1.0 / 1024.0);
        let (mut sum, mut term) = (f(1.0), f(1.0));
        for n in 1..=12 {
            term = div(term * r, f(n as f64));
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum * f(2f64.powi(k as i32))
    }

    /// One Newton step on exp from the f64 logarithm.
    pub fn ln(x: TwoFloat) -> TwoFloat {
        let y = f(x.hi().ln());
        y + x * exp(-y) - f(1.0)
    }

    pub fn softmax(logits: &[f64]) -> Vec<TwoFloat> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<TwoFloat> = logits.iter().map(|&l| exp(f(l) - f(max))).collect();
        let sum = exps.iter().fold(f(0.0), |a, &b| a + b);
        exps.into_iter().map(|e| div(e, sum)).collect()
    }

    fn xlog(x: f64, m: TwoFloat) -> TwoFloat {
        if x > 0.0 {
            f(x) * ln(div(f(x), m))
        } else {
            f(0.0)
        }
    }

    pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
        let mut acc = f(0.0);
        for (&a, &b) in p.iter().zip(q) {
            let m = (f(a) + f(b)) * f(0.5);
            acc += xlog(a, m) + xlog(b, m);
        }
        div(acc, f(2.0) * LN_2).hi()
    }

    pub fn kld_tau(p: &[f64], q: &[f64]) -> f64 {
        let kl = p.iter().zip(q).fold(f(0.0), |acc, (&a, &b)| acc + xlog(a, f(b)));
        (f(1.0) - exp(-kl)).hi()
    }
}

fn random_probs(rng: &mut ChaCha8Rng, dim: usize, sparse: bool) -> Vec<f64> {
    let logits: Vec<f64> = (0..dim).map(|_| rng.random_range(-12.0..12.0)).collect();
    let mut p = softmax_values(&logits);
    if sparse && dim > 1 {
        let zero = rng.random_range(0..dim);
        p[zero] = 0.0;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
    }
    p
}

fn distribution_math() -> Check {
    let tol = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..10_000 {
        let dim = rng.random_range(1..=128);
        let logits: Vec<f64> = (0..dim).map(|_| rng.random_range(-30.0..30.0)).collect();
        let got = softmax(&TokenDistribution::logits(logits.clone()).unwrap()).unwrap();
        for (g, o) in got.values().iter().zip(dd::softmax(&logits)) {
            let err = (dd::f(*g) - o).hi().abs();
            worst = worst.max(err);
            ensure(err <= tol, || format!("softmax case {case}: error {err:e}"))?;
        }

        let p = random_probs(&mut rng, dim, case % 3 == 0);
        let q = random_probs(&mut rng, dim, false);
        let (pd, qd) = (TokenDistribution::probs(p.clone()).unwrap(), TokenDistribution::probs(q.clone()).unwrap());
        let j = jsd(&pd, &qd).unwrap();
        let err = (j - dd::jsd(&p, &q)).abs();
        worst = worst.max(err);
        ensure(err <= tol, || format!("jsd case {case}: error {err:e}"))?;
        ensure(j == jsd(&qd, &pd).unwrap(), || format!("jsd asymmetric in case {case}"))?;
        ensure(jsd(&pd, &pd).unwrap() == 0.0, || format!("jsd(p,p) != 0 in case {case}"))?;

        let k = kld_tau(&pd, &qd).unwrap();
        let err = (k - dd::kld_tau(&p, &q)).abs();
        worst = worst.max(err);
        ensure(err <= tol, || format!("kld_tau case {case}: error {err:e}"))?;
    }
    let disjoint = jsd(
        &TokenDistribution::probs(vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
        &TokenDistribution::probs(vec![0.0, 0.0, 0.25, 0.75]).unwrap(),
    )
    .unwrap();
    ensure(disjoint == 1.0, || format!("disjoint-support jsd = {disjoint}"))?;
    Ok(format!("10000 vectors, worst error {worst:.2e}"))
}

// ---- RVD degeneration ----

fn rvd_degeneration() -> Check {
    let (samples, backend) = scenario_backend(50, false);
    for (i, s) in samples.iter().enumerate() {
        let sampling = SamplingConfig { seed: i as u64, temperature: 1.3, top_p: 0.98, ..Default::default() };
        let single = build_conversation(s, Setting::new(ConvSetting::CleanConv, PromptMode::QuestionPrompt)).unwrap();
        let reg = regular_generate(&backend, &single, &sampling, 8).unwrap();
        let rvd = rvd_generate(&backend, &single, &RvdConfig { beta: 2.0, sampling, max_new_tokens: 8, ..Default::default() }).unwrap();
        ensure(rvd.tokens == reg.tokens, || format!("sample {i}: single-turn tokens differ"))?;
        for setting in [ConvSetting::HalluConv, ConvSetting::FactConv, ConvSetting::IrrConv] {
            let multi = build_conversation(s, Setting::new(setting, PromptMode::FormattingPrompt)).unwrap();
            let reg = regular_generate(&backend, &multi, &sampling, 8).unwrap();
            let cfg = RvdConfig { fixed_alpha: Some(0.0), sampling, max_new_tokens: 8, ..Default::default() };
            let fixed = rvd_generate(&backend, &multi, &cfg).unwrap();
            ensure(fixed.tokens == reg.tokens, || format!("sample {i} {setting}: fixed_alpha=0 tokens differ"))?;
        }
    }
    Ok("50 single-turn and 150 multi-turn conversations token-identical".into())
}

// ---- snowballing and mitigation ----

fn snowballing() -> Check {
    let (samples, backend) = scenario_backend(100, false);
    let run = run_eval(&samples, &backend, &greedy_config(), None);
    ensure(run.clean(), || format!("run errors: {:?} {:?}", run.errors, run.aborted))?;
    let (clean, hallu) = split(&run.outcomes);
    let clean_acc = accuracy(&clean, Target::Pos).unwrap();
    let hallu_acc = accuracy(&hallu, Target::Pos).unwrap();
    let fr = flip_rate(&clean, &hallu).unwrap().unwrap_or(0.0);
    let tol = 0.05;
    let detail = format!("CleanConv acc {clean_acc:.4}, HalluConv acc {hallu_acc:.4}, FR {fr:.4}");
    ensure(hallu_acc <= 0.15 + tol && fr >= 0.85 - tol && clean_acc >= 0.85 - tol, || detail.clone())?;
    Ok(detail)
}

/// Base-2 JSD between the residual table and the query-only mix for one sample.
fn closed_form_tau(lambda: f64) -> f64 {
    let f = FILLERS.len() as f64;
    let r = [MAJOR, 1.0 - MAJOR, 0.0, 0.0, 0.0, 0.0];
    let q = [(1.0 - lambda) * MAJOR, (1.0 - lambda) * (1.0 - MAJOR), lambda / f, lambda / f, lambda / f, lambda / f];
    dd::jsd(&r, &q)
}

/// Expected greedy HalluConv accuracy: full and residual tables mirror each other, so
/// the blend answers correctly exactly when α exceeds one half.
fn closed_form_accuracy(n: usize, beta: f64) -> f64 {
    (0..n).filter(|&i| adaptive_alpha(closed_form_tau(query_mix(i, n)), beta) > 0.5).count() as f64 / n as f64
}

fn mitigation() -> Check {
    let n = 100;
    let (samples, backend) = scenario_backend(n, false);
    let mut cfg = greedy_config();
    cfg.settings = vec![ConvSetting::HalluConv];
    let regular = run_eval(&samples, &backend, &cfg, None);
    cfg.decoding = DecodingMode::Rvd { beta: 2.0, divergence: Divergence::Jsd };
    let rvd = run_eval(&samples, &backend, &cfg, None);
    ensure(regular.clean() && rvd.clean(), || "run errors".into())?;
    let reg_acc = accuracy(&regular.outcomes, Target::Pos).unwrap();
    let rvd_acc = accuracy(&rvd.outcomes, Target::Pos).unwrap();
    let expect_reg = closed_form_accuracy(n, 0.0);
    let expect_rvd = closed_form_accuracy(n, 2.0);
    ensure((reg_acc - expect_reg).abs() <= 1e-6 && (rvd_acc - expect_rvd).abs() <= 1e-6, || {
        format!("accuracy {reg_acc} / {rvd_acc} vs closed form {expect_reg} / {expect_rvd}")
    })?;
    for (i, t) in rvd.traces.iter().filter(|t| t.step.step == 0).enumerate() {
        let want = closed_form_tau(query_mix(i, n));
        let tau = t.step.tau.unwrap_or(f64::NAN);
        ensure((tau - want).abs() <= 1e-6, || format!("sample {i}: tau {tau} vs {want}"))?;
    }
    let gain = rvd_acc - reg_acc;
    ensure(gain >= 0.24, || format!("gain {gain:.4} below 0.24"))?;
    Ok(format!("HalluConv acc {reg_acc:.4} -> {rvd_acc:.4} (gain {gain:.4}), closed form matched"))
}

fn beta_sweep() -> Check {
    let (samples, backend) = scenario_backend(100, true);
    let sweep = run_sweep(&samples, &backend, &greedy_config(), &DEFAULT_BETAS, Divergence::Jsd, None);
    ensure(sweep.errors.is_empty() && sweep.aborted.is_none(), || format!("{:?} {:?}", sweep.errors, sweep.aborted))?;
    ensure(sweep.rows.len() == DEFAULT_BETAS.len(), || "missing rows".into())?;
    let series = |f: fn(&snowball_cli::eval::SweepRow) -> f64| sweep.rows.iter().map(f).collect::<Vec<_>>();
    let hallu = series(|r| r.hallu_acc);
    let wpi = series(|r| r.wpi_acc);
    let detail = format!("hallu {hallu:.2?}, wpi {wpi:.2?}");
    ensure(hallu.windows(2).all(|w| w[1] >= w[0]), || format!("HalluConv not non-decreasing: {detail}"))?;
    ensure(wpi.windows(2).all(|w| w[1] <= w[0]), || format!("WPI not non-increasing: {detail}"))?;
    Ok(detail)
}

// ---- WPI construction ----

fn wpi_construction() -> Check {
    let samples = synthetic_samples(1005);
    let mut key_at = BTreeMap::new();
    let mut none_at = BTreeMap::new();
    for s in &samples {
        let (w, conv) = build_wpi_sample(s, derive_seed(0, "wpi", &s.id)).map_err(|e| e.to_string())?;
        ensure(is_six_digits(&w.key) && is_six_digits(&w.distractor) && w.key != w.distractor, || {
            format!("{}: bad key/distractor {} {}", s.id, w.key, w.distractor)
        })?;
        let labels: Vec<char> = w.options.iter().map(|o| o.label).collect();
        ensure(labels == LABELS, || format!("{}: labels {labels:?}", s.id))?;
        let mut texts: Vec<&str> = w.options.iter().map(|o| o.text.as_str()).collect();
        texts.sort();
        let mut want = vec![w.key.as_str(), w.distractor.as_str(), NONE_OPTION];
        want.sort();
        ensure(texts == want, || format!("{}: options {texts:?}", s.id))?;
        ensure(w.label_of(&w.key) == Some(w.correct_label), || format!("{}: wrong correct label", s.id))?;

        let reply = conv.turns[1].text();
        let sentences = split_sentences(&reply);
        let base = split_sentences(&s.fact_description);
        ensure(sentences.len() == base.len() + 1, || format!("{}: sentence count", s.id))?;
        ensure(sentences[w.insertion_index] == key_sentence(&w.key), || format!("{}: key not at insertion index", s.id))?;
        ensure(reply.matches(&w.key).count() == 1 && !reply.contains(&w.distractor), || {
            format!("{}: key or distractor leaked into reply", s.id)
        })?;
        ensure(conv.turns[2].text() == w.question_text(), || format!("{}: question turn", s.id))?;
        *key_at.entry(w.correct_label).or_insert(0usize) += 1;
        *none_at.entry(w.label_of(NONE_OPTION).unwrap()).or_insert(0usize) += 1;
    }
    let chi2_p = |counts: &BTreeMap<char, usize>| {
        let expected = samples.len() as f64 / 3.0;
        let stat: f64 = LABELS
            .iter()
            .map(|l| {
                let o = *counts.get(l).unwrap_or(&0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        ChiSquared::new(2.0).unwrap().sf(stat)
    };
    let (p_key, p_none) = (chi2_p(&key_at), chi2_p(&none_at));
    let detail = format!("key labels {key_at:?} p={p_key:.3}, none labels {none_at:?} p={p_none:.3}");
    ensure(p_key > 0.01 && p_none > 0.01, || detail.clone())?;
    Ok(detail)
}

// ---- builder ----

fn builder_golden() -> Check {
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/builder_golden.jsonl"))
        .map_err(|e| e.to_string())?;
    let (raws, mock, fates) = builder_fixture();
    let first = build_dataset(&raws, &BuildConfig { parallelism: 4, ..Default::default() }, &mock).map_err(|e| e.to_string())?;
    let second = build_dataset(&raws, &BuildConfig::default(), &mock).map_err(|e| e.to_string())?;
    let (a, b) = (serialize_samples(&first.samples), serialize_samples(&second.samples));
    ensure(a == b, || "runs differ".into())?;
    ensure(a == golden, || "output differs from golden file".into())?;
    ensure(first.samples.len() == 8 && first.stats.kept == 8, || format!("kept {}", first.samples.len()))?;

    let mut expected: BTreeMap<HallucinationType, usize> = BTreeMap::new();
    for (_, f) in &fates {
        if let Fate::Kept(t) = f {
            *expected.entry(*t).or_default() += 1;
        }
    }
    let mut observed: BTreeMap<HallucinationType, usize> = BTreeMap::new();
    for s in &first.samples {
        *observed.entry(s.hallucination_type).or_default() += 1;
    }
    ensure(observed == expected && first.stats.per_type == expected, || {
        format!("per-type {observed:?} / {:?} vs {expected:?}", first.stats.per_type)
    })?;
    let dropped: usize = first.stats.drops.values().sum();
    ensure(dropped + first.stats.kept == raws.len(), || format!("drops {:?}", first.stats.drops))?;
    Ok(format!("8 of 10 kept, byte-identical to golden, per-type {observed:?}"))
}

// ---- protocol ----

fn conformance() -> Check {
    let samples = synthetic_samples(8);
    let scenario = snowball_scenario(&samples, true);
    let full: Arc<dyn ModelBackend> = Arc::new(ScenarioBackend::new(scenario.clone()).unwrap());
    let caps = Capabilities { logits: false, complete: true };
    let bare: Arc<dyn ModelBackend> = Arc::new(ScenarioBackend::with_capabilities(scenario, caps).unwrap());
    let a = serve(full, "127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let b = serve(bare, "127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let report = run_conformance(&ConformanceTarget { base_url: a.url(), no_logits_url: Some(b.url()) });
    let passed = report.checks.iter().filter(|c| c.passed).count();
    ensure(report.checks.len() == 12 && report.passed(), || format!("{passed}/12 passed\n{report}"))?;
    Ok(format!("{passed}/12 checks passed"))
}

// ---- end to end ----

fn snowball(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_snowball"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    ensure(out.status.success(), || format!("snowball {args:?} failed: {stderr}"))?;
    Ok(stderr)
}

fn pipeline(dir: &Path, cache: &Path) -> Result<(Vec<u8>, String), String> {
    let (raws, mock, _) = builder_fixture();
    let raw: String = raws.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(dir.join("raw.jsonl"), raw).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("gen.json"), mock.to_json()).map_err(|e| e.to_string())?;
    let cache = cache.to_str().unwrap();
    snowball(dir, &["build", "--source", "raw.jsonl", "--generator", "scripted:gen.json", "--out", "dataset.jsonl", "--parallelism", "3"])?;
    snowball(dir, &["scenario", "--dataset", "dataset.jsonl", "--out", "scenario.json"])?;
    let mut log = String::new();
    for (mode, out) in [("regular", "regular.jsonl"), ("rvd", "rvd.jsonl")] {
        log += &snowball(dir, &[
            "eval", "--scenario", "scenario.json", "--dataset", "dataset.jsonl",
            "--settings", "clean_conv,hallu_conv", "--decoding", mode,
            "--temperature", "1.0", "--top-p", "0.95", "--seed", "7",
            "--cache-dir", cache, "--parallelism", "4", "--out", out, "--trace-out", &format!("{out}.trace"),
        ])?;
    }
    snowball(dir, &["report", "regular.jsonl", "rvd.jsonl", "--format", "csv", "--out", "report.csv"])?;
    let mut bytes = Vec::new();
    for f in ["dataset.jsonl", "dataset.jsonl.stats.json", "scenario.json", "regular.jsonl", "rvd.jsonl", "regular.jsonl.trace", "rvd.jsonl.trace", "report.csv"] {
        bytes.extend(std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
        bytes.push(0);
    }
    Ok((bytes, log))
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b, &c] {
        std::fs::create_dir_all(d).map_err(|e| e.to_string())?;
    }
    let (cold_a, _) = pipeline(&a, &tmp.path().join("cache-a"))?;
    let (cold_b, _) = pipeline(&b, &tmp.path().join("cache-b"))?;
    let (warm, log) = pipeline(&c, &tmp.path().join("cache-a"))?;
    ensure(cold_a == cold_b, || "two cold runs differ".into())?;
    ensure(cold_a == warm, || "warm-cache run differs from cold run".into())?;
    ensure(log.contains("(16 from cache)"), || format!("warm run did not hit the cache: {log}"))?;
    Ok(format!("{} bytes of artifacts identical across cold, cold and warm runs", cold_a.len()))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Check);
    let criteria: [Criterion; 10] = [
        ("metrics oracle equivalence", Duration::from_secs(5), metrics_oracle),
        ("distribution math", Duration::from_secs(10), distribution_math),
        ("rvd degeneration", Duration::from_secs(5), rvd_degeneration),
        ("snowballing reproduction", Duration::from_secs(30), snowballing),
        ("rvd mitigation", Duration::from_secs(30), mitigation),
        ("beta sweep monotonicity", Duration::from_secs(60), beta_sweep),
        ("wpi construction", Duration::from_secs(5), wpi_construction),
        ("builder determinism and keep rule", Duration::from_secs(5), builder_golden),
        ("protocol conformance", Duration::from_secs(10), conformance),
        ("end-to-end determinism", Duration::from_secs(60), end_to_end),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {name} [{elapsed:.2?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{elapsed:.2?}]: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
