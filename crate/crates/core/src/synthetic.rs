//! Deterministic toy review domains.
//!
//! Each domain draws filler words from its own topic pool; sentiment cue words
//! come from two pools (positive, negative) shared by every domain. A review's
//! label is carried by its cue words; polarities alternate, and `noise` flips
//! the rating independently.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ReviewRecord;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// topic words per domain
    pub topic_words: usize,
    /// cue words per polarity
    pub sentiment_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// cue words per review
    pub cues: usize,
    /// probability that a rating contradicts the cue words
    pub noise: f64,
    /// share of extra rating-3 records mixed into the stream
    pub neutral_rate: f64,
    /// labeled (non-neutral) records per domain
    pub records: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topic_words: 40,
            sentiment_words: 8,
            min_words: 6,
            max_words: 14,
            cues: 2,
            noise: 0.02,
            neutral_rate: 0.1,
            records: 1600,
        }
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word<R: Rng>(rng: &mut R, consonants: &[u8]) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        w.push(consonants[rng.random_range(0..consonants.len())] as char);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    w
}

fn pool<R: Rng>(rng: &mut R, n: usize, consonants: &[u8], taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, consonants);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Shared positive and negative cue pools.
pub fn sentiment_pools(cfg: &SyntheticConfig, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = rng::stream(seed, Stream::Synthetic, &[0]);
    let mut taken = BTreeSet::new();
    let pos = pool(&mut rng, cfg.sentiment_words, CONSONANTS, &mut taken);
    let neg = pool(&mut rng, cfg.sentiment_words, CONSONANTS, &mut taken);
    (pos, neg)
}

/// Topic pool of one domain. Domains use different consonant subsets, so
/// their character statistics differ as well as their words.
pub fn topic_pool(cfg: &SyntheticConfig, seed: u64, domain: u64) -> Vec<String> {
    let (pos, neg) = sentiment_pools(cfg, seed);
    let mut taken: BTreeSet<String> = pos.into_iter().chain(neg).collect();
    let mut rng = rng::stream(seed, Stream::Synthetic, &[1, domain]);
    let mut consonants: Vec<u8> = CONSONANTS.to_vec();
    // keep a random two-thirds of the consonants
    for i in (1..consonants.len()).rev() {
        consonants.swap(i, rng.random_range(0..=i));
    }
    consonants.truncate(CONSONANTS.len() * 2 / 3);
    pool(&mut rng, cfg.topic_words, &consonants, &mut taken)
}

pub fn generate_domain(cfg: &SyntheticConfig, seed: u64, domain: u64) -> Vec<ReviewRecord> {
    let (pos, neg) = sentiment_pools(cfg, seed);
    let topics = topic_pool(cfg, seed, domain);
    let mut rng = rng::stream(seed, Stream::Synthetic, &[2, domain]);
    let mut out = Vec::with_capacity(cfg.records);
    let mut labeled = 0;
    while labeled < cfg.records {
        let len = rng.random_range(cfg.min_words..=cfg.max_words.max(cfg.min_words)).max(cfg.cues);
        let mut words: Vec<&str> = (0..len).map(|_| topics[rng.random_range(0..topics.len())].as_str()).collect();
        if rng.random::<f64>() < cfg.neutral_rate {
            out.push(ReviewRecord { text: words.join(" "), rating: 3 });
            continue;
        }
        let label = labeled % 2 == 0;
        let cues = if label { &pos } else { &neg };
        let mut slots: Vec<usize> = (0..len).collect();
        for k in 0..cfg.cues.min(len) {
            let j = rng.random_range(k..slots.len());
            slots.swap(k, j);
            words[slots[k]] = cues[rng.random_range(0..cues.len())].as_str();
        }
        let shown = if rng.random::<f64>() < cfg.noise { !label } else { label };
        let rating = if shown { rng.random_range(4..=5) } else { rng.random_range(1..=2) };
        out.push(ReviewRecord { text: words.join(" "), rating });
        labeled += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_domain() {
        let cfg = SyntheticConfig { records: 50, ..Default::default() };
        assert_eq!(generate_domain(&cfg, 3, 0), generate_domain(&cfg, 3, 0));
        assert_ne!(generate_domain(&cfg, 3, 0), generate_domain(&cfg, 3, 1));
    }

    #[test]
    fn pools_are_disjoint() {
        let cfg = SyntheticConfig::default();
        let (pos, neg) = sentiment_pools(&cfg, 1);
        let a = topic_pool(&cfg, 1, 0);
        let b = topic_pool(&cfg, 1, 1);
        let all: BTreeSet<&String> = pos.iter().chain(&neg).chain(&a).collect();
        assert_eq!(all.len(), pos.len() + neg.len() + a.len());
        assert_ne!(a, b);
    }

    #[test]
    fn record_mix() {
        let cfg = SyntheticConfig { records: 400, neutral_rate: 0.2, ..Default::default() };
        let recs = generate_domain(&cfg, 5, 0);
        let labeled = recs.iter().filter(|r| r.rating != 3).count();
        assert_eq!(labeled, 400);
        assert!(recs.len() > 400);
        let positive = recs.iter().filter(|r| r.rating >= 4).count();
        assert!((150..250).contains(&positive), "{positive}");
    }
}
