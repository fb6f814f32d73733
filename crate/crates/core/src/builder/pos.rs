//! Part-of-speech tagging for hallucination-type allocation.
//!
//! `RuleTagger` is a lexicon-and-suffix fallback so that allocation works without an
//! external NLP toolkit. A better tagger can be plugged in through [`PosTagger`].

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Adjective,
    Verb,
    Other,
}

pub trait PosTagger: Send + Sync {
    /// Tags `words[index]` given its sentence. Words are lowercase.
    fn tag(&self, words: &[String], index: usize) -> Pos;
}

const ADJECTIVES: &[&str] = &[
    // colors
    "white", "black", "blue", "red", "green", "yellow", "brown", "gray", "grey", "orange",
    "pink", "purple", "silver", "gold", "golden", "tan", "beige", "maroon", "navy", "teal",
    "dark", "light", "colorful", "blond", "blonde",
    // size and shape
    "large", "small", "big", "little", "tall", "short", "long", "huge", "tiny", "round",
    "square", "rectangular", "triangular", "thick", "thin", "wide", "narrow", "flat", "curved",
    // materials used attributively
    "wooden", "metallic", "plastic", "leather", "woven", "glass", "metal", "concrete", "brick",
    // states
    "open", "closed", "empty", "full", "wet", "dry", "clean", "dirty", "old", "new", "young",
    "cloudy", "sunny", "clear", "overcast", "bright", "shiny", "calm", "rough", "smooth",
    "cooked", "raw", "ripe", "sliced", "fresh", "striped", "dotted", "plaid", "bare", "leafy",
    "happy", "sad", "hot", "cold", "warm", "soft", "hard", "high", "low", "modern", "antique",
];

const VERBS: &[&str] = &[
    "stand", "sit", "walk", "run", "lie", "eat", "drink", "play", "ride", "hold", "wear",
    "fly", "swim", "sleep", "look", "watch", "read", "talk", "carry", "throw", "catch",
    "hit", "skate", "surf", "ski", "park", "drive", "cut", "cook", "hang", "grow",
];

const NOUN_EXCEPTIONS: &[&str] = &[
    "building", "ceiling", "clothing", "railing", "painting", "ring", "king", "string",
    "thing", "wing", "swing", "sign", "bed", "sled", "shed", "wood", "glasses", "bus",
    "grass", "dress", "bottle", "table", "cable", "animal", "pedestal", "sandal", "bowl",
];

const FUNCTION_WORDS: &[&str] = &[
    "yes", "no", "the", "a", "an", "this", "that", "these", "those", "it", "he", "she",
    "they", "is", "are", "was", "were", "be", "of", "and", "or", "not", "to", "in", "at",
    "by", "with", "from", "for", "as",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTagger;

impl RuleTagger {
    fn tag_word(word: &str, prev: Option<&str>) -> Pos {
        if word.is_empty() || FUNCTION_WORDS.contains(&word) {
            return Pos::Other;
        }
        if word.chars().all(|c| c.is_ascii_digit()) {
            return Pos::Other;
        }
        if NOUN_EXCEPTIONS.contains(&word) {
            return Pos::Noun;
        }
        if ADJECTIVES.contains(&word) {
            return Pos::Adjective;
        }
        let stem_is_verb = |suffix: &str| {
            word.strip_suffix(suffix).is_some_and(|stem| {
                VERBS.contains(&stem)
                    || VERBS.iter().any(|v| {
                        // running -> run, sitting -> sit
                        stem.len() == v.len() + 1
                            && stem.starts_with(v)
                            && stem.ends_with(&v[v.len() - 1..])
                    })
                    || VERBS.iter().any(|v| v.strip_suffix('e') == Some(stem))
            })
        };
        if VERBS.contains(&word) || stem_is_verb("ing") || stem_is_verb("s") || stem_is_verb("ed") {
            return Pos::Verb;
        }
        if word.ends_with("ing") && word.len() > 5 {
            return Pos::Verb;
        }
        if word.ends_with("ed") && word.len() > 4 && matches!(prev, Some("is" | "are" | "was" | "were")) {
            return Pos::Adjective;
        }
        const ADJ_SUFFIXES: [&str; 6] = ["ous", "ful", "less", "ive", "able", "ish"];
        if ADJ_SUFFIXES.iter().any(|s| word.len() > s.len() + 2 && word.ends_with(s)) {
            return Pos::Adjective;
        }
        if word.chars().all(|c| c.is_alphabetic() || c == '-') {
            return Pos::Noun;
        }
        Pos::Other
    }
}

impl PosTagger for RuleTagger {
    fn tag(&self, words: &[String], index: usize) -> Pos {
        let prev = index.checked_sub(1).map(|i| words[i].as_str());
        RuleTagger::tag_word(&words[index], prev)
    }
}
