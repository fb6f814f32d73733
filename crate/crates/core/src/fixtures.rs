//! Deterministic fixtures shared by unit, integration and acceptance tests.

use crate::builder::{regional_listing, rewrite_regional, RawRecord};
use crate::generator::ScriptedMock;
use crate::prompt::{render_prompt, vars, TemplateId};
use crate::record::HallucinationType;

pub mod sim;

/// Expected fate of a builder fixture record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Kept(HallucinationType),
    NotContradicted,
    FactNotEntailed,
}

struct Spec {
    id: &'static str,
    question: &'static str,
    answer: &'static str,
    full_answer: &'static str,
    regional: &'static [&'static str],
    objects: &'static [&'static str],
    fact: &'static str,
    answer_neg: &'static str,
    hallu_fact: &'static str,
    fate: Fate,
    imagined: Option<&'static str>,
}

const SPECS: &[Spec] = &[
    Spec {
        id: "r01",
        question: "What animal is lying on the couch?",
        answer: "cat",
        full_answer: "The animal is a cat.",
        regional: &["a cat on a couch", "a red pillow"],
        objects: &[],
        fact: "A cat is lying on the couch.",
        answer_neg: "dog",
        hallu_fact: "A dog is lying on the couch.",
        fate: Fate::Kept(HallucinationType::Existence),
        imagined: None,
    },
    Spec {
        id: "r02",
        question: "What is the man holding?",
        answer: "umbrella",
        full_answer: "The man is holding an umbrella.",
        regional: &["a man with an umbrella", "a wet street"],
        objects: &[],
        fact: "The man is holding an umbrella.",
        answer_neg: "briefcase",
        hallu_fact: "The man is holding a briefcase.",
        fate: Fate::Kept(HallucinationType::Existence),
        imagined: None,
    },
    Spec {
        id: "r03",
        question: "What color are the trousers that the boy is wearing?",
        answer: "blue",
        full_answer: "The trousers are blue.",
        regional: &["a boy in blue trousers", "a green lawn"],
        objects: &[],
        fact: "The color of the trousers is blue.",
        answer_neg: "red",
        hallu_fact: "The color of the trousers is red.",
        fate: Fate::Kept(HallucinationType::Attribute),
        imagined: None,
    },
    Spec {
        id: "r04",
        question: "Is the sky cloudy or clear?",
        answer: "cloudy",
        full_answer: "The sky is cloudy.",
        regional: &["cloudy sky over the hills"],
        objects: &[],
        fact: "The sky is cloudy.",
        answer_neg: "clear",
        hallu_fact: "The sky is clear.",
        fate: Fate::Kept(HallucinationType::Attribute),
        imagined: None,
    },
    Spec {
        id: "r05",
        question: "What is the woman doing?",
        answer: "sitting",
        full_answer: "The woman is sitting.",
        regional: &["woman sitting on a bench", "a park path"],
        objects: &[],
        fact: "The woman is sitting on a bench.",
        answer_neg: "standing",
        hallu_fact: "The woman is standing on a bench.",
        fate: Fate::Kept(HallucinationType::Attribute),
        imagined: None,
    },
    Spec {
        id: "r06",
        question: "Is the lamp to the left or to the right of the bed?",
        answer: "left",
        full_answer: "The lamp is to the left of the bed.",
        regional: &["a lamp left of the bed", "white sheets"],
        objects: &[],
        fact: "The lamp is to the left of the bed.",
        answer_neg: "right",
        hallu_fact: "The lamp is to the right of the bed.",
        fate: Fate::Kept(HallucinationType::Relation),
        imagined: None,
    },
    Spec {
        id: "r07",
        question: "Is the cat on or under the table?",
        answer: "under",
        full_answer: "The cat is under the table.",
        regional: &["a cat under a table", "a wooden floor"],
        objects: &[],
        fact: "The cat is under the table.",
        answer_neg: "on",
        hallu_fact: "The cat is on the table.",
        fate: Fate::Kept(HallucinationType::Relation),
        imagined: None,
    },
    Spec {
        id: "r08",
        question: "Is there a dog in the picture?",
        answer: "no",
        full_answer: "No, there is no dog.",
        regional: &["a man riding a bicycle", "a bench under a tree"],
        objects: &["bench", "tree", "man", "bicycle"],
        fact: "There is no umbrella in the image.",
        answer_neg: "Yes",
        hallu_fact: "There is a umbrella in the image.",
        fate: Fate::Kept(HallucinationType::Imagination),
        imagined: Some("umbrella"),
    },
    Spec {
        id: "r09",
        question: "What color is the car?",
        answer: "white",
        full_answer: "The car is white.",
        regional: &["a white car parked outside"],
        objects: &[],
        fact: "The car is white.",
        answer_neg: "silver",
        hallu_fact: "The car is silver.",
        fate: Fate::NotContradicted,
        imagined: None,
    },
    Spec {
        id: "r10",
        question: "Which animal is on the grass?",
        answer: "horse",
        full_answer: "The animal is a horse.",
        regional: &["a brown horse on grass"],
        objects: &[],
        fact: "A horse is standing on the grass.",
        answer_neg: "cow",
        hallu_fact: "A cow is standing on the grass.",
        fate: Fate::FactNotEntailed,
        imagined: None,
    },
];

fn describe(regional: &[String], fact: &str) -> String {
    let scene = regional.first().map(String::as_str).unwrap_or("an everyday scene");
    format!("The photo shows {scene}. {fact} The lighting is soft and natural.")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Ten raw records, their scripted generator, and the expected fate of each record.
///
/// Two records are designed to fail verification: `r09` (the hallucinatory description
/// still supports the original answer) and `r10` (the ground description fails the
/// fact check).
pub fn builder_fixture() -> (Vec<RawRecord>, ScriptedMock, Vec<(&'static str, Fate)>) {
    let mut mock = ScriptedMock::default();
    let mut raws = Vec::new();
    let mut fates = Vec::new();
    for s in SPECS {
        let raw = RawRecord {
            id: s.id.into(),
            image_ref: format!("images/{}.jpg", s.id),
            question: s.question.into(),
            answer: s.answer.into(),
            full_answer: s.full_answer.into(),
            regional_descriptions: strings(s.regional),
            objects: strings(s.objects),
        };
        let regional = raw.regional_descriptions.clone();

        let (question, answer, full_answer) = match s.imagined {
            Some(object) => {
                let prompt = render_prompt(
                    TemplateId::ImaginationObject,
                    &vars([("objects", &s.objects.join(", ")), ("avoid", "none")]),
                )
                .unwrap();
                mock.on(&prompt, format!("{object}\n"));
                (
                    format!("Is there a {object} in the image?"),
                    "No".to_string(),
                    format!("No, there is no {object} in the image."),
                )
            }
            None => (s.question.to_string(), s.answer.to_string(), s.full_answer.to_string()),
        };

        let fact_prompt = render_prompt(
            TemplateId::FactGen,
            &vars([("question", &question), ("fullAnswer", &full_answer)]),
        )
        .unwrap();
        mock.on(&fact_prompt, s.fact);

        let htype = match s.fate {
            Fate::Kept(t) => t,
            Fate::NotContradicted => HallucinationType::Attribute,
            Fate::FactNotEntailed => HallucinationType::Existence,
        };
        let hallu_regional = if htype == HallucinationType::Imagination {
            regional.clone()
        } else {
            let prompt = render_prompt(
                TemplateId::ConflictGen,
                &vars([
                    ("question", &question),
                    ("answer", &answer),
                    ("fact", s.fact),
                    ("hallucination_type", htype.as_str()),
                ]),
            )
            .unwrap();
            mock.on(
                &prompt,
                format!("Conflict answer: {}\nConflict fact: {}", s.answer_neg, s.hallu_fact),
            );
            rewrite_regional(&regional, &answer, s.answer_neg)
        };

        let fact_description = describe(&regional, s.fact);
        let hallu_description = describe(&hallu_regional, s.hallu_fact);
        for (listing, fact, desc) in [
            (regional_listing(&regional), s.fact, &fact_description),
            (regional_listing(&hallu_regional), s.hallu_fact, &hallu_description),
        ] {
            let prompt = render_prompt(
                TemplateId::DescriptionGen,
                &vars([("regional_descriptions", &listing), ("fact", fact)]),
            )
            .unwrap();
            mock.on(&prompt, desc.clone());
        }

        let verify = |candidate: &str, competitor: &str, desc: &str| {
            render_prompt(
                TemplateId::ConflictVerify,
                &vars([
                    ("answer", candidate),
                    ("modified", competitor),
                    ("modified_description", desc),
                ]),
            )
            .unwrap()
        };
        let original_verdict = match s.fate {
            Fate::NotContradicted => "Yes, the context still supports it.",
            _ => "No. The context states otherwise.",
        };
        let fact_verdict = match s.fate {
            Fate::FactNotEntailed => "No",
            _ => "Yes",
        };
        mock.on(&verify(&answer, s.answer_neg, &hallu_description), original_verdict);
        mock.on(&verify(s.answer_neg, &answer, &hallu_description), "yes");
        mock.on(&verify(&answer, s.answer_neg, &fact_description), fact_verdict);

        raws.push(raw);
        fates.push((s.id, s.fate));
    }
    (raws, mock, fates)
}
