//! Reference rules shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use vtl_core::data::Granularity;
use vtl_core::eval::{extract_descriptors, DescriptorSets};

/// Reference rule: lowercase and strip punctuation, then exact label match, then
/// the label whose every word appears in the text (most words first, list order on ties).
pub fn rule_oracle(text: &str, labels: &[&'static str]) -> Option<&'static str> {
    let clean: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let words: Vec<&str> = clean.split_whitespace().collect();
    let label_words =
        |l: &str| -> Vec<String> { l.to_lowercase().split('-').map(String::from).collect() };
    for &l in labels {
        if label_words(l)
            .iter()
            .map(String::as_str)
            .eq(words.iter().copied())
        {
            return Some(l);
        }
    }
    let mut ranked: Vec<(usize, usize, &'static str)> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| label_words(l).iter().all(|w| words.contains(&w.as_str())))
        .map(|(i, l)| (usize::MAX - label_words(l).len(), i, *l))
        .collect();
    ranked.sort();
    ranked.first().map(|r| r.2)
}

pub const TAXONOMY_FIXTURES: [(&str, Granularity, Option<&str>); 20] = [
    ("Normal", Granularity::Two, Some("Normal")),
    ("  scratch ", Granularity::Three, Some("Scratch")),
    (
        "there is a dent on the edge",
        Granularity::Five,
        Some("Dent-Edge"),
    ),
    ("dent edge", Granularity::Five, Some("Dent-Edge")),
    (
        "scratch surface",
        Granularity::Five,
        Some("Scratch-Surface"),
    ),
    (
        "A SCRATCH along the surface.",
        Granularity::Five,
        Some("Scratch-Surface"),
    ),
    ("defect", Granularity::Two, Some("Defect")),
    (
        "a clear defect is present",
        Granularity::Two,
        Some("Defect"),
    ),
    ("looks normal to me", Granularity::Two, Some("Normal")),
    ("normal", Granularity::Five, Some("Normal")),
    ("dent", Granularity::Three, Some("Dent")),
    (
        "small dent near the middle",
        Granularity::Three,
        Some("Dent"),
    ),
    ("dent", Granularity::Five, None),
    ("scratch", Granularity::Two, None),
    ("broken", Granularity::Three, None),
    ("", Granularity::Two, None),
    ("edge scratch", Granularity::Five, Some("Scratch-Edge")),
    ("scratch and dent", Granularity::Three, Some("Scratch")),
    (
        "surface dent, edge scratch",
        Granularity::Five,
        Some("Scratch-Surface"),
    ),
    ("dent-surface", Granularity::Five, Some("Dent-Surface")),
];

/// One random batch of descriptor cases with its set-intersection recall.
pub fn recall_case<R: Rng>(vocab: &[&str], rng: &mut R) -> (Vec<DescriptorSets>, f64) {
    let n = rng.gen_range(1..6);
    let mut samples = Vec::new();
    let mut want = 0.0;
    for _ in 0..n {
        let mut reference = BTreeSet::new();
        while reference.len() < 5 {
            reference.insert(vocab[rng.gen_range(0..vocab.len())].to_string());
        }
        let text: Vec<&str> = (0..rng.gen_range(0..9))
            .map(|_| {
                if rng.gen_bool(0.8) {
                    vocab[rng.gen_range(0..vocab.len())]
                } else {
                    "xyz"
                }
            })
            .collect();
        let predicted = extract_descriptors(&text.join(" "), vocab);
        let pset: BTreeSet<String> = predicted.iter().cloned().collect();
        want += reference.intersection(&pset).count() as f64 / 5.0;
        samples.push(DescriptorSets {
            reference: reference.into_iter().collect(),
            predicted,
        });
    }
    (samples, want / n as f64)
}
