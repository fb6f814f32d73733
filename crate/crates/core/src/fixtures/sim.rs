//! Synthetic verified samples for simulated-model tests.

use crate::record::{HallucinationType, SampleRecord};

pub use crate::sim::synth::{query_mix, snowball_scenario, wpi_none_mass, FILLERS, MAJOR};

const PAIRS: [(HallucinationType, &str, &str, &str); 12] = [
    (HallucinationType::Existence, "What animal is on the sofa", "cat", "dog"),
    (HallucinationType::Existence, "What is the man holding", "umbrella", "briefcase"),
    (HallucinationType::Existence, "What vehicle is parked outside", "bus", "truck"),
    (HallucinationType::Attribute, "What color is the kite", "blue", "red"),
    (HallucinationType::Attribute, "What is the weather like", "sunny", "rainy"),
    (HallucinationType::Attribute, "What is the table made of", "wood", "glass"),
    (HallucinationType::Relation, "Which side is the lamp on", "left", "right"),
    (HallucinationType::Relation, "Is the cup on or under the shelf", "under", "on"),
    (HallucinationType::Relation, "Is the bird above or below the branch", "above", "below"),
    (HallucinationType::Imagination, "", "No", "Yes"),
    (HallucinationType::Imagination, "", "No", "Yes"),
    (HallucinationType::Imagination, "", "No", "Yes"),
];

const ABSENT_OBJECTS: [&str; 30] = [
    "giraffe", "guitar", "pizza", "violin", "rocket", "penguin", "anchor", "cactus", "lantern",
    "trumpet", "zebra", "kangaroo", "telescope", "volcano", "windmill", "castle", "dolphin",
    "tractor", "helmet", "parrot", "pumpkin", "snowman", "robot", "camel", "canoe", "harp",
    "igloo", "octopus", "piano", "sombrero",
];

fn absent_object(k: usize) -> String {
    let noun = ABSENT_OBJECTS[k % ABSENT_OBJECTS.len()];
    match k / ABSENT_OBJECTS.len() {
        0 => noun.to_string(),
        round => format!("{noun} number {round}"),
    }
}

/// `n` synthetic verified samples cycling over all four hallucination types.
pub fn synthetic_samples(n: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| {
            let (htype, stem, pos, neg) = PAIRS[i % PAIRS.len()];
            let id = format!("s{i:03}");
            // every question is distinct so the simulated model can tell samples apart
            let question = match htype {
                HallucinationType::Imagination => format!("Is there a {} in the image?", absent_object(i)),
                _ => format!("In photo {i}, {}?", stem.to_lowercase()),
            };
            SampleRecord {
                id: id.clone(),
                image_ref: format!("images/{id}.jpg"),
                question,
                answer_pos: pos.into(),
                full_answer: format!("The answer is {pos}."),
                fact: format!("The answer is {pos}."),
                regional_descriptions: vec![format!("photo {i}")],
                hallucination_type: htype,
                answer_neg: neg.into(),
                hallu_fact: format!("The answer is {neg}."),
                hallu_regional_descriptions: vec![format!("photo {i}")],
                fact_description: format!("Photo {i} is an ordinary scene. The answer is {pos}. It was taken outdoors."),
                hallu_description: format!("Photo {i} is an ordinary scene. The answer is {neg}. It was taken outdoors."),
                verified: true,
                extra: Default::default(),
            }
        })
        .collect()
}
