use super::*;
use crate::conversation::{build_conversation, ConvSetting, PromptMode, Setting};
use crate::decoding::{jsd, rvd_generate, softmax, RvdConfig, TokenDistribution};
use crate::fixtures::sim::{snowball_scenario, synthetic_samples};
use crate::wpi::build_wpi_sample;

fn setting(c: ConvSetting) -> Setting {
    Setting::new(c, PromptMode::QuestionPrompt)
}

#[test]
fn signatures_of_each_setting() {
    let samples = synthetic_samples(12);
    let scenario = snowball_scenario(&samples, true);
    let s = &samples[3];
    let sig = |c: &Conversation| signature_of(&scenario, c);

    let clean = build_conversation(s, setting(ConvSetting::CleanConv)).unwrap();
    let hallu = build_conversation(s, setting(ConvSetting::HalluConv)).unwrap();
    let fact = build_conversation(s, setting(ConvSetting::FactConv)).unwrap();
    let irr = build_conversation(s, setting(ConvSetting::IrrConv)).unwrap();

    assert_eq!(sig(&clean).signature, ContextSignature::qa(true, FirstRound::None, true));
    assert_eq!(sig(&hallu).signature, ContextSignature::qa(true, FirstRound::Hallu, true));
    assert_eq!(sig(&fact).signature, ContextSignature::qa(true, FirstRound::Fact, true));
    assert_eq!(sig(&irr).signature, ContextSignature::qa(true, FirstRound::Irrelevant, true));
    assert_eq!(sig(&hallu.query_only()).signature, ContextSignature::qa(false, FirstRound::None, true));
    assert_eq!(sig(&hallu.residual()), sig(&clean));
    assert_eq!(sig(&hallu).sample.as_deref(), Some(s.id.as_str()));

    let (_, probe) = build_wpi_sample(s, 5).unwrap();
    assert_eq!(sig(&probe).signature, ContextSignature::wpi(true, FirstRound::Fact));
    assert_eq!(sig(&probe.residual()).signature, ContextSignature::wpi(true, FirstRound::None));
    assert_eq!(sig(&probe.query_only()).signature, ContextSignature::wpi(false, FirstRound::None));
}

#[test]
fn unknown_first_round_is_counted() {
    let samples = synthetic_samples(4);
    let backend = ScenarioBackend::new(snowball_scenario(&samples, false)).unwrap();
    let mut conv = build_conversation(&samples[0], setting(ConvSetting::HalluConv)).unwrap();
    conv.turns[1] = crate::conversation::Turn::assistant("Something nobody wrote.");
    let cls = signature_of(backend.scenario(), &conv);
    assert!(!cls.recognized);
    assert_eq!(cls.signature.first_round, FirstRound::None);
    backend.logits(&conv, &[]).unwrap();
    assert_eq!(backend.unrecognized_count(), 1);
}

#[test]
fn served_logits_match_table() {
    let samples = synthetic_samples(12);
    let backend = ScenarioBackend::new(snowball_scenario(&samples, false)).unwrap();
    let conv = build_conversation(&samples[0], setting(ConvSetting::HalluConv)).unwrap();
    let logits = backend.logits(&conv, &[]).unwrap();
    assert_eq!(logits.len(), backend.meta().vocab_size);
    assert_eq!(logits, backend.logits(&conv, &[]).unwrap());
    let p = softmax(&TokenDistribution::logits(logits).unwrap()).unwrap();
    let table = backend.distribution(&conv, &[]).unwrap();
    for (a, b) in p.values().iter().zip(&table) {
        assert!((a - b).abs() < 1e-7);
    }
    let neg = backend.token_id("dog").unwrap() as usize;
    assert!((table[neg] - 0.9).abs() < 1e-15);

    // any generated token moves all mass to end-of-sequence
    let after = backend.distribution(&conv, &[neg as u32]).unwrap();
    assert_eq!(after[backend.meta().eos_token_id as usize], 1.0);
    assert!(backend.logits(&conv, &[9999]).is_err());
}

#[test]
fn wpi_roles_follow_the_key() {
    let samples = synthetic_samples(12);
    let backend = ScenarioBackend::new(snowball_scenario(&samples, true)).unwrap();
    for seed in 0..20 {
        let (wpi, conv) = build_wpi_sample(&samples[seed as usize % 12], seed).unwrap();
        let p = backend.distribution(&conv, &[]).unwrap();
        let key = backend.token_id(&wpi.correct_label.to_string()).unwrap() as usize;
        assert!((p[key] - 0.9).abs() < 1e-12, "seed {seed}");
        let text = backend.complete(&conv, &SamplingConfig::greedy(), 4).unwrap();
        assert_eq!(text, wpi.correct_label.to_string());

        // without the history the two numeric options are indistinguishable
        let r = backend.distribution(&conv.residual(), &[]).unwrap();
        let numeric: Vec<f64> = wpi
            .options
            .iter()
            .filter(|o| o.text != NONE_OPTION)
            .map(|o| r[backend.token_id(&o.label.to_string()).unwrap() as usize])
            .collect();
        assert_eq!(numeric[0], numeric[1]);
    }
}

#[test]
fn identical_residual_and_query_force_zero_alpha() {
    let samples = synthetic_samples(3);
    let mut scenario = snowball_scenario(&samples, false);
    let residual: Vec<_> = scenario
        .behaviors
        .iter()
        .filter(|b| b.signature == ContextSignature::qa(true, FirstRound::None, true))
        .map(|b| (b.sample_id.clone(), b.probs.clone()))
        .collect();
    for b in &mut scenario.behaviors {
        if !b.signature.has_image {
            b.probs = residual.iter().find(|(id, _)| *id == b.sample_id).unwrap().1.clone();
        }
    }
    let backend = ScenarioBackend::new(scenario).unwrap();
    for s in &samples {
        let conv = build_conversation(s, setting(ConvSetting::HalluConv)).unwrap();
        for beta in [0.5, 2.0, 100.0] {
            let g = rvd_generate(&backend, &conv, &RvdConfig { beta, ..RvdConfig::default() }).unwrap();
            assert_eq!(g.trace[0].tau, Some(0.0));
            assert_eq!(g.trace[0].alpha, 0.0);
        }
        let r = TokenDistribution::probs(backend.distribution(&conv.residual(), &[]).unwrap()).unwrap();
        let q = TokenDistribution::probs(backend.distribution(&conv.query_only(), &[]).unwrap()).unwrap();
        assert_eq!(jsd(&r, &q).unwrap(), 0.0);
    }
}

#[test]
fn scenario_validation() {
    let bad = r#"{"vocab": ["<eos>", "a"], "default": {"a": 0.5}}"#;
    assert!(matches!(
        ScenarioBackend::new(Scenario::from_json(bad).unwrap()),
        Err(ScenarioError::BadDistribution { .. })
    ));
    let unknown = r#"{"vocab": ["<eos>", "a"], "default": {"b": 1.0}}"#;
    assert!(matches!(
        ScenarioBackend::new(Scenario::from_json(unknown).unwrap()),
        Err(ScenarioError::UnknownToken { .. })
    ));
    let no_eos = r#"{"vocab": ["a"], "default": {"a": 1.0}}"#;
    assert!(matches!(
        ScenarioBackend::new(Scenario::from_json(no_eos).unwrap()),
        Err(ScenarioError::MissingEos(_))
    ));
    let roles = r#"{"vocab": ["<eos>", "a"], "default": {"@key": 1.0}}"#;
    assert!(matches!(
        ScenarioBackend::new(Scenario::from_json(roles).unwrap()),
        Err(ScenarioError::MissingLabels { .. })
    ));
    let ok = r#"{"vocab": ["<eos>", "hello"], "default": {"hello": 1.0}}"#;
    let b = ScenarioBackend::new(Scenario::from_json(ok).unwrap()).unwrap();
    assert_eq!(b.meta().vocab_size, 2);
    assert_eq!(b.meta().name, "simlvlm");
    assert_eq!(b.detokenize(&[1, 0]).unwrap(), "hello");
}

#[test]
fn scenario_json_round_trip() {
    let s = snowball_scenario(&synthetic_samples(5), true);
    assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
}
