//! Rule-based reading of feedback text.

use std::collections::BTreeSet;

use crate::netgraph::Approach;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Increase,
    Decrease,
    Maintain,
}

const INCREASE: &[&str] = &[
    "more", "increase", "increased", "higher", "max out", "maxed out", "packed", "heavier", "busier", "too few",
    "too low", "raise", "boost", "add",
];
const DECREASE: &[&str] = &[
    "fewer", "less", "decrease", "decreased", "reduce", "reduced", "lighter", "quieter", "too many", "too much",
    "too high", "cut", "drop",
];
const MAINTAIN: &[&str] = &[
    "accurate", "no change", "looks good", "looks right", "look right", "realistic", "about right", "keep",
];

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn has_phrase(tokens: &[String], phrase: &str) -> bool {
    let p: Vec<&str> = phrase.split(' ').collect();
    tokens.windows(p.len()).any(|w| w.iter().zip(&p).all(|(a, b)| a == b))
}

fn matches_any(tokens: &[String], phrases: &[&str]) -> bool {
    phrases.iter().any(|p| has_phrase(tokens, p))
}

/// Single directional intent, or `None` when the text has none or mixes
/// directions.
pub fn parse_intent(text: &str) -> Option<Intent> {
    let tokens = words(text);
    let found: Vec<Intent> = [
        (Intent::Increase, INCREASE),
        (Intent::Decrease, DECREASE),
        (Intent::Maintain, MAINTAIN),
    ]
    .into_iter()
    .filter(|(_, phrases)| matches_any(&tokens, phrases))
    .map(|(i, _)| i)
    .collect();
    match found.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

/// Approaches the text names; "every approach" and similar mean all four.
pub fn named_approaches(text: &str) -> BTreeSet<Approach> {
    let tokens = words(text);
    if ["every approach", "all approaches", "each approach", "every direction", "all directions"]
        .iter()
        .any(|p| has_phrase(&tokens, p))
    {
        return Approach::ALL.into_iter().collect();
    }
    let mut out = BTreeSet::new();
    for t in &tokens {
        if let Ok(a) = t.parse::<Approach>() {
            out.insert(a);
        }
    }
    out
}
