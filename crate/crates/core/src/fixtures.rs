//! Synthetic labeled corpora for tests and demos.
//!
//! Gold labels are drawn so that every passage is fully labeled, parents are
//! usually the OR of their children, and a configurable share of passages
//! carries no concern at all.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, GoldLabels, Passage};
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub passages: usize,
    pub seed: u64,
    /// Probability that a passage expresses at least one concern.
    pub positive_rate: f64,
    /// Probability that a (passage, label) pair is in the Easy partition.
    pub easy_rate: f64,
    /// Probability that a positive passage also flags one parent with no
    /// positive child.
    pub parent_only_rate: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            passages: 200,
            seed: 7,
            positive_rate: 0.6,
            easy_rate: 0.8,
            parent_only_rate: 0.1,
        }
    }
}

const FILLER: [&str; 5] = [
    "The author reflects on a recent community meeting.",
    "Several readers wrote in to share their own experiences.",
    "This post continues a series started last month.",
    "Local news outlets covered the story in some detail.",
    "Comments on the original article were mixed.",
];

pub fn synthetic_corpus(t: &Taxonomy, spec: FixtureSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let leaves = t.leaf_labels();
    let parents = t.parents();
    let mut passages = Vec::with_capacity(spec.passages);
    let mut gold = HashMap::with_capacity(spec.passages);

    for i in 0..spec.passages {
        let passage_id = format!("p{i:04}");
        let mut labels: BTreeMap<LabelId, bool> = t.label_ids().into_iter().map(|id| (id, false)).collect();
        let mut sentences: Vec<String> = Vec::new();

        if !leaves.is_empty() && rng.random_bool(spec.positive_rate) {
            let k = rng.random_range(1..=3.min(leaves.len()));
            for child in leaves.choose_multiple(&mut rng, k) {
                labels.insert(child.clone(), true);
                let parent = t.node(child).and_then(|n| n.parent.clone()).expect("leaf has parent");
                labels.insert(parent, true);
                let node = t.node(child).expect("leaf in taxonomy");
                sentences.push(format!("Some say that {}", node.description.to_lowercase()));
            }
            if rng.random_bool(spec.parent_only_rate) {
                let parent = parents.choose(&mut rng).expect("taxonomy has parents");
                labels.insert(parent.clone(), true);
                let node = t.node(parent).expect("parent in taxonomy");
                sentences.push(format!("In general, {}", node.description.to_lowercase()));
            }
        }
        while sentences.len() < 2 || (sentences.len() < 5 && rng.random_bool(0.3)) {
            sentences.push(FILLER.choose(&mut rng).expect("non-empty").to_string());
        }
        let easy = t
            .label_ids()
            .into_iter()
            .map(|id| (id, rng.random_bool(spec.easy_rate)))
            .collect();

        passages.push(Passage {
            passage_id: passage_id.clone(),
            text: sentences.join(" "),
        });
        gold.insert(
            passage_id.clone(),
            GoldLabels {
                passage_id,
                labels,
                easy,
            },
        );
    }
    Corpus {
        passages,
        gold: Some(gold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_fully_labeled_and_reproducible() {
        let t = Taxonomy::vaxconcerns();
        let spec = FixtureSpec::default();
        let a = synthetic_corpus(&t, spec);
        assert_eq!(a.len(), 200);
        assert_eq!(a.pair_count(), 4800);
        assert_eq!(a, synthetic_corpus(&t, spec));
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        assert_eq!(Corpus::load(buf.as_slice(), &t).unwrap(), a);
    }

    #[test]
    fn positive_rate_is_respected_at_extremes() {
        let t = Taxonomy::vaxconcerns();
        let none = synthetic_corpus(&t, FixtureSpec { positive_rate: 0.0, ..Default::default() });
        assert!(none.gold.unwrap().values().all(|g| g.labels.values().all(|v| !v)));
        let all = synthetic_corpus(&t, FixtureSpec { positive_rate: 1.0, ..Default::default() });
        assert!(all.gold.unwrap().values().all(|g| g.labels.values().any(|v| *v)));
    }
}
