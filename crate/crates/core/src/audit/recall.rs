use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::stem::stem;

/// Token filter applied before stemming.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFilter {
    /// Tokens must be strictly longer than this many characters.
    pub min_len_exclusive: usize,
    pub require_alphabetic: bool,
    pub stemmer: String,
}

impl Default for TokenFilter {
    fn default() -> Self {
        Self { min_len_exclusive: 3, require_alphabetic: true, stemmer: "porter".into() }
    }
}

impl TokenFilter {
    pub fn keeps(&self, token: &str) -> bool {
        token.chars().count() > self.min_len_exclusive
            && (!self.require_alphabetic || token.chars().any(char::is_alphabetic))
    }

    /// Set of stems of the tokens the filter retains.
    pub fn stems(&self, text: &str) -> BTreeSet<String> {
        tokenize(text).filter(|t| self.keeps(t)).map(|t| stem(&t)).collect()
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub value: f64,
    /// The log side had no qualifying tokens, so recall is 1.0 by convention.
    pub vacuous: bool,
}

/// Share of the log's stems that also appear among the evidence stems.
pub fn keyword_recall(log_text: &str, evidence_text: &str, filter: &TokenFilter) -> Recall {
    recall_of_sets(&filter.stems(log_text), &filter.stems(evidence_text))
}

pub fn recall_of_sets(log: &BTreeSet<String>, evidence: &BTreeSet<String>) -> Recall {
    if log.is_empty() {
        return Recall { value: 1.0, vacuous: true };
    }
    let hit = log.iter().filter(|s| evidence.contains(*s)).count();
    Recall { value: hit as f64 / log.len() as f64, vacuous: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_disjoint() {
        let f = TokenFilter::default();
        let t = "Set Velocity to 4 m/s then Run Simulation";
        assert_eq!(keyword_recall(t, t, &f).value, 1.0);
        assert_eq!(keyword_recall("velocity acceleration", "banana orchard", &f).value, 0.0);
    }

    #[test]
    fn morphology_is_stemmed_away() {
        let f = TokenFilter::default();
        let r = keyword_recall("accelerates", "the acceleration block", &f);
        assert_eq!(r.value, 1.0);
        assert!(!r.vacuous);
    }

    #[test]
    fn short_and_numeric_tokens_dropped() {
        let f = TokenFilter::default();
        assert!(!f.keeps("set"));
        assert!(!f.keeps("2024"));
        assert!(f.keeps("v2x9"));
        let r = keyword_recall("set 4 m/s 1234", "anything", &f);
        assert!(r.vacuous);
        assert_eq!(r.value, 1.0);
    }

    proptest! {
        #[test]
        fn invariant_under_evidence_order_and_duplication(
            log in proptest::collection::vec("[a-z]{2,9}", 1..12),
            ev in proptest::collection::vec("[a-z]{2,9}", 1..12),
            seed in any::<u64>(),
        ) {
            let f = TokenFilter::default();
            let a = keyword_recall(&log.join(" "), &ev.join(" "), &f);
            let mut shuffled = ev.clone();
            shuffled.extend(ev.iter().cloned());
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            shuffled.reverse();
            let b = keyword_recall(&log.join(" "), &shuffled.join(" "), &f);
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a.value));
        }

        #[test]
        fn appending_log_drives_recall_to_one(
            log in proptest::collection::vec("[a-z]{2,9}", 1..12),
            ev in "[a-z ]{0,40}",
        ) {
            let f = TokenFilter::default();
            let l = log.join(" ");
            let r = keyword_recall(&l, &format!("{ev} {l}"), &f);
            prop_assert_eq!(r.value, 1.0);
        }
    }
}
