//! Seeded synthetic text for toy-scale experiments.
//!
//! Sentences come from small topic lexicons. Inside a topic each subject is
//! paired with one verb, so masked words are predictable from context and a
//! model can learn them. General-register topics and nuclear-domain topics
//! share only function words, which makes the domain shift between them
//! easy to measure. A third register of non-nuclear science topics supplies
//! the negative class for the binary task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, LabelScheme};
use crate::error::Result;

/// A topic lexicon. `subjects[i]` always goes with `verbs[i]`.
#[derive(Debug, Clone, Copy)]
pub struct Topic {
    pub name: &'static str,
    pub adjectives: &'static [&'static str],
    pub subjects: &'static [&'static str],
    pub verbs: &'static [&'static str],
    pub objects: &'static [&'static str],
    pub places: &'static [&'static str],
}

pub const GENERAL_TOPICS: &[Topic] = &[
    Topic {
        name: "animals",
        adjectives: &["small", "happy", "brown", "lazy"],
        subjects: &["dog", "cat", "horse", "rabbit", "bird"],
        verbs: &["chases", "watches", "follows", "finds", "likes"],
        objects: &["ball", "apple", "bread", "cheese", "stick"],
        places: &["garden", "park", "kitchen", "farm"],
    },
    Topic {
        name: "town",
        adjectives: &["busy", "quiet", "old", "friendly"],
        subjects: &["baker", "teacher", "driver", "farmer", "singer"],
        verbs: &["sells", "carries", "paints", "cleans", "buys"],
        objects: &["cake", "chair", "window", "basket", "hat"],
        places: &["market", "street", "school", "shop"],
    },
];

pub const DOMAIN_TOPICS: &[Topic] = &[
    Topic {
        name: "fuel",
        adjectives: &["enriched", "spent", "fresh", "irradiated"],
        subjects: &["uranium", "plutonium", "thorium", "pellet", "cladding"],
        verbs: &["fissions", "absorbs", "moderates", "shields", "releases"],
        objects: &["neutron", "isotope", "coolant", "assembly", "cask"],
        places: &["reactor", "core", "repository", "facility"],
    },
    Topic {
        name: "cycle",
        adjectives: &["centrifugal", "gaseous", "safeguarded", "reprocessed"],
        subjects: &[
            "centrifuge",
            "cascade",
            "inspector",
            "reprocessor",
            "canister",
        ],
        verbs: &["separates", "verifies", "converts", "stores", "vitrifies"],
        objects: &[
            "hexafluoride",
            "tailings",
            "yellowcake",
            "actinide",
            "waste",
        ],
        places: &["enrichment", "conversion", "mill", "vault"],
    },
];

pub const SCIENCE_TOPICS: &[Topic] = &[
    Topic {
        name: "astronomy",
        adjectives: &["distant", "bright", "spiral", "faint"],
        subjects: &["galaxy", "telescope", "pulsar", "comet", "nebula"],
        verbs: &["emits", "observes", "rotates", "orbits", "scatters"],
        objects: &["photon", "spectrum", "planet", "dust", "redshift"],
        places: &["cluster", "halo", "observatory", "sky"],
    },
    Topic {
        name: "biology",
        adjectives: &["cellular", "mutant", "folded", "soluble"],
        subjects: &["enzyme", "protein", "ribosome", "bacterium", "membrane"],
        verbs: &["catalyzes", "binds", "translates", "digests", "transports"],
        objects: &["substrate", "peptide", "receptor", "glucose", "lipid"],
        places: &["cytoplasm", "tissue", "culture", "nucleus"],
    },
];

/// Subject categories used for generated labeled documents.
pub const NFC_CODES: &[i64] = &[5, 11, 21, 22];
pub const OTHER_CODES: &[i64] = &[40, 59, 66, 79];

fn pick<'a, R: Rng>(rng: &mut R, words: &'a [&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty lexicon")
}

pub fn sentence<R: Rng>(topic: &Topic, rng: &mut R) -> String {
    let i = rng.gen_range(0..topic.subjects.len());
    format!(
        "the {} {} {} the {} in the {} .",
        pick(rng, topic.adjectives),
        topic.subjects[i],
        topic.verbs[i],
        pick(rng, topic.objects),
        pick(rng, topic.places)
    )
}

/// A document of 2 to 4 sentences about one topic.
pub fn paragraph<R: Rng>(topic: &Topic, rng: &mut R) -> String {
    let n = rng.gen_range(2..=4);
    (0..n)
        .map(|_| sentence(topic, rng))
        .collect::<Vec<_>>()
        .join(" ")
}

fn paragraphs(topics: &[Topic], n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic = topics.choose(&mut rng).expect("topics");
            paragraph(topic, &mut rng)
        })
        .collect()
}

pub fn general_texts(n: usize, seed: u64) -> Vec<String> {
    paragraphs(GENERAL_TOPICS, n, seed)
}

pub fn domain_texts(n: usize, seed: u64) -> Vec<String> {
    paragraphs(DOMAIN_TOPICS, n, seed)
}

/// A balanced binary task: NFC documents are drawn from the nuclear topics,
/// the rest from the other science topics, so the classes are separable
/// by keyword. Ids are `{prefix}-{index}`.
pub fn separable_documents(n: usize, seed: u64, prefix: &str) -> Result<Vec<Document>> {
    let scheme = LabelScheme::osti();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let (topics, codes) = if positive {
                (DOMAIN_TOPICS, NFC_CODES)
            } else {
                (SCIENCE_TOPICS, OTHER_CODES)
            };
            let topic = topics.choose(&mut rng).expect("topics");
            let text = paragraph(topic, &mut rng);
            let primary = *codes.choose(&mut rng).expect("codes");
            Document::new(format!("{prefix}-{i:05}"), text, vec![primary], &scheme)
        })
        .collect()
}

/// A demonstration corpus: `labeled` separable documents plus `unlabeled`
/// general-register documents without categories.
pub fn demo_corpus(labeled: usize, unlabeled: usize, seed: u64) -> Result<Vec<Document>> {
    let scheme = LabelScheme::osti();
    let mut docs = separable_documents(labeled, seed, "doc")?;
    for (i, text) in general_texts(unlabeled, seed.wrapping_add(1))
        .into_iter()
        .enumerate()
    {
        docs.push(Document::new(format!("gen-{i:05}"), text, vec![], &scheme)?);
    }
    Ok(docs)
}

/// Every word any generator can produce, sorted.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&str> = vec!["the", "in", "."];
    for t in GENERAL_TOPICS
        .iter()
        .chain(DOMAIN_TOPICS)
        .chain(SCIENCE_TOPICS)
    {
        for list in [t.adjectives, t.subjects, t.verbs, t.objects, t.places] {
            words.extend_from_slice(list);
        }
    }
    words.sort_unstable();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn content_words(topics: &[Topic]) -> BTreeSet<&'static str> {
        topics
            .iter()
            .flat_map(|t| [t.adjectives, t.subjects, t.verbs, t.objects, t.places])
            .flatten()
            .copied()
            .collect()
    }

    #[test]
    fn registers_share_no_content_words() {
        let g = content_words(GENERAL_TOPICS);
        let d = content_words(DOMAIN_TOPICS);
        let s = content_words(SCIENCE_TOPICS);
        assert!(g.is_disjoint(&d) && g.is_disjoint(&s) && d.is_disjoint(&s));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(general_texts(5, 1), general_texts(5, 1));
        assert_ne!(general_texts(5, 1), general_texts(5, 2));
        let docs = separable_documents(10, 3, "x").unwrap();
        assert_eq!(docs.iter().filter(|d| d.nfc_label == Some(true)).count(), 5);
        assert_eq!(docs, separable_documents(10, 3, "x").unwrap());
    }

    #[test]
    fn subjects_pair_with_verbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let topic = &DOMAIN_TOPICS[0];
        for _ in 0..20 {
            let s = sentence(topic, &mut rng);
            let words: Vec<&str> = s.split(' ').collect();
            let i = topic.subjects.iter().position(|w| *w == words[2]).unwrap();
            assert_eq!(words[3], topic.verbs[i]);
        }
    }

    #[test]
    fn demo_corpus_mixes_labeled_and_unlabeled() {
        let docs = demo_corpus(20, 5, 9).unwrap();
        assert_eq!(docs.len(), 25);
        assert_eq!(docs.iter().filter(|d| !d.is_labeled()).count(), 5);
        assert!(lexicon().contains(&"uranium"));
    }
}
