//! Scenario synthesis: a snowballing simulated model for any dataset.

use std::collections::BTreeMap;

use crate::record::SampleRecord;
use crate::sim::{
    Behavior, ContextSignature, FirstRound, Scenario, ScenarioSample, ROLE_DISTRACTOR, ROLE_KEY, ROLE_NONE,
};

/// Probability the favored answer gets in every answer-bearing context.
pub const MAJOR: f64 = 0.9;

/// Words the query-only context spreads its guessing mass over. None of them is an
/// answer.
pub const FILLERS: [&str; 4] = ["maybe", "unsure", "perhaps", "unknown"];

/// Mixing weight of filler mass in sample `i`'s query-only distribution. Spread over
/// (0, 1) so the residual-vs-query divergence is graded across samples.
pub fn query_mix(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Probability the residual WPI context puts on "None of the options are correct" for
/// sample `i`.
pub fn wpi_none_mass(i: usize, n: usize) -> f64 {
    0.35 + 0.6 * (i as f64 + 0.5) / n as f64
}

fn probs<const N: usize>(items: [(&str, f64); N]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in items {
        *m.entry(k.to_string()).or_insert(0.0) += v;
    }
    m
}

/// A scenario in which every sample is answered correctly from the image, flipped by a
/// hallucinatory first round, and guessed without the image with a sample-dependent
/// amount of filler mass.
///
/// With `wpi`, the scenario also answers WPI probes: the full context picks the key
/// option, the image-only context leans towards "none" by a sample-dependent margin, and
/// the query-only context is uniform over the three roles.
pub fn snowball_scenario(samples: &[SampleRecord], wpi: bool) -> Scenario {
    let mut vocab = vec!["<eos>".to_string()];
    let mut push = |t: &str| {
        if !vocab.iter().any(|v| v == t) {
            vocab.push(t.to_string());
        }
    };
    for t in FILLERS {
        push(t);
    }
    if wpi {
        for t in ["A", "B", "C"] {
            push(t);
        }
    }
    for s in samples {
        push(&s.answer_pos);
        push(&s.answer_neg);
    }

    let n = samples.len();
    let favor = |a: &str, b: &str| probs([(a, MAJOR), (b, 1.0 - MAJOR)]);
    let mut behaviors = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (pos, neg) = (s.answer_pos.as_str(), s.answer_neg.as_str());
        let mut add = |signature, probs| {
            behaviors.push(Behavior { sample_id: Some(s.id.clone()), signature, probs });
        };
        add(ContextSignature::qa(true, FirstRound::None, true), favor(pos, neg));
        add(ContextSignature::qa(true, FirstRound::Hallu, true), favor(neg, pos));
        add(ContextSignature::qa(true, FirstRound::Fact, true), favor(pos, neg));
        add(ContextSignature::qa(true, FirstRound::Irrelevant, true), favor(pos, neg));

        let lambda = query_mix(i, n);
        let mut q = probs([(pos, (1.0 - lambda) * MAJOR), (neg, (1.0 - lambda) * (1.0 - MAJOR))]);
        for f in FILLERS {
            q.insert(f.to_string(), lambda / FILLERS.len() as f64);
        }
        add(ContextSignature::qa(false, FirstRound::None, true), q);

        if wpi {
            let none = wpi_none_mass(i, n);
            add(
                ContextSignature::wpi(true, FirstRound::None),
                probs([(ROLE_NONE, none), (ROLE_KEY, (1.0 - none) / 2.0), (ROLE_DISTRACTOR, (1.0 - none) / 2.0)]),
            );
        }
    }
    if wpi {
        behaviors.push(Behavior {
            sample_id: None,
            signature: ContextSignature::wpi(true, FirstRound::Fact),
            probs: probs([(ROLE_KEY, MAJOR), (ROLE_NONE, 0.05), (ROLE_DISTRACTOR, 0.05)]),
        });
        behaviors.push(Behavior {
            sample_id: None,
            signature: ContextSignature::wpi(false, FirstRound::None),
            probs: probs([(ROLE_KEY, 1.0 / 3.0), (ROLE_NONE, 1.0 / 3.0), (ROLE_DISTRACTOR, 1.0 / 3.0)]),
        });
    }

    Scenario {
        name: "simlvlm".into(),
        vocab,
        eos: "<eos>".into(),
        samples: samples
            .iter()
            .map(|s| ScenarioSample {
                id: s.id.clone(),
                image_ref: Some(s.image_ref.clone()),
                question: s.question.clone(),
                hallu_description: s.hallu_description.clone(),
                fact_description: s.fact_description.clone(),
            })
            .collect(),
        default: FILLERS.iter().map(|f| (f.to_string(), 1.0 / FILLERS.len() as f64)).collect(),
        behaviors,
    }
}
