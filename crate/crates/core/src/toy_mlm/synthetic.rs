//! Seeded toy languages for hermetic transfer experiments.
//!
//! A language is a lexicon sampled from an order-2 character Markov chain
//! plus a word-level successor table. Sentences follow the successor table
//! most of the time and fall back to Zipf-distributed words otherwise.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

const END: char = '\0';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub alphabet: Vec<char>,
    pub lexicon_size: usize,
    pub min_word_chars: usize,
    pub max_word_chars: usize,
    /// Successor chars allowed after each two-char context.
    pub branching: usize,
    /// Preferred next words per word.
    pub successors: usize,
    /// Probability of following the successor table.
    pub follow_prob: f64,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn with_alphabet(chars: std::ops::RangeInclusive<char>, seed: u64) -> Self {
        Self {
            alphabet: chars.collect(),
            lexicon_size: 400,
            min_word_chars: 3,
            max_word_chars: 9,
            branching: 3,
            successors: 3,
            follow_prob: 0.75,
            min_sentence_words: 4,
            max_sentence_words: 9,
            seed,
        }
    }

    /// Source-side language used by the bundled experiment.
    pub fn source() -> Self {
        Self::with_alphabet('a'..='p', 11)
    }

    /// Target-side language; shares the letters `h..=p` with [`Self::source`].
    pub fn target() -> Self {
        Self::with_alphabet('h'..='w', 29)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    lexicon: Vec<String>,
    next_words: Vec<Vec<usize>>,
    spec: LanguageSpec,
}

fn sample_word(
    chain: &mut BTreeMap<(char, char), (Vec<char>, WeightedIndex<f64>)>,
    spec: &LanguageSpec,
    rng: &mut ChaCha8Rng,
) -> String {
    let mut word = String::new();
    let (mut p2, mut p1) = (END, END);
    loop {
        let n = word.chars().count();
        let entry = chain.entry((p2, p1)).or_insert_with(|| {
            let mut next: Vec<char> = spec
                .alphabet
                .choose_multiple(rng, spec.branching.min(spec.alphabet.len()))
                .copied()
                .collect();
            next.push(END);
            let weights: Vec<f64> = next.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            (next, dist)
        });
        let c = entry.0[entry.1.sample(rng)];
        if c == END {
            if n >= spec.min_word_chars {
                return word;
            }
            continue;
        }
        word.push(c);
        if n + 1 >= spec.max_word_chars {
            return word;
        }
        p2 = p1;
        p1 = c;
    }
}

impl SyntheticLanguage {
    pub fn new(spec: LanguageSpec) -> Self {
        assert!(!spec.alphabet.is_empty() && spec.lexicon_size > 0);
        assert!(spec.min_word_chars >= 1 && spec.min_word_chars <= spec.max_word_chars);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut chain = BTreeMap::new();
        let mut seen = BTreeSet::new();
        let mut lexicon = Vec::with_capacity(spec.lexicon_size);
        let mut attempts = 0;
        while lexicon.len() < spec.lexicon_size && attempts < spec.lexicon_size * 200 {
            attempts += 1;
            let w = sample_word(&mut chain, &spec, &mut rng);
            if seen.insert(w.clone()) {
                lexicon.push(w);
            }
        }
        let next_words = (0..lexicon.len())
            .map(|_| (0..spec.successors).map(|_| rng.gen_range(0..lexicon.len())).collect())
            .collect();
        Self {
            lexicon,
            next_words,
            spec,
        }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// `n` sentences, one per line, deterministic in `seed`.
    pub fn sentences(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.spec.seed.rotate_left(17));
        let zipf = Zipf::new(self.lexicon.len() as u64, 1.0).expect("valid zipf");
        let draw = |rng: &mut ChaCha8Rng| zipf.sample(rng) as usize - 1;
        (0..n)
            .map(|_| {
                let len = rng.gen_range(self.spec.min_sentence_words..=self.spec.max_sentence_words);
                let mut w = draw(&mut rng);
                let mut words = vec![self.lexicon[w].as_str()];
                for _ in 1..len {
                    w = if rng.gen_bool(self.spec.follow_prob) {
                        *self.next_words[w].choose(&mut rng).expect("non-empty successors")
                    } else {
                        draw(&mut rng)
                    };
                    words.push(self.lexicon[w].as_str());
                }
                words.join(" ")
            })
            .collect()
    }
}

/// Sentence counts and seeds of the bundled experiment corpora.
pub const BUNDLED_SOURCE_SENTENCES: usize = 3000;
pub const BUNDLED_TARGET_SENTENCES: usize = 1500;
pub const BUNDLED_SOURCE_SEED: u64 = 1;
pub const BUNDLED_TARGET_SEED: u64 = 2;

/// The source and target corpora the bundled experiment trains on.
pub fn bundled_corpora() -> (Vec<String>, Vec<String>) {
    let source = SyntheticLanguage::new(LanguageSpec::source()).sentences(BUNDLED_SOURCE_SENTENCES, BUNDLED_SOURCE_SEED);
    let target = SyntheticLanguage::new(LanguageSpec::target()).sentences(BUNDLED_TARGET_SENTENCES, BUNDLED_TARGET_SEED);
    (source, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_alphabet() {
        let a = SyntheticLanguage::new(LanguageSpec::target());
        let b = SyntheticLanguage::new(LanguageSpec::target());
        assert_eq!(a.lexicon(), b.lexicon());
        assert_eq!(a.sentences(20, 5), b.sentences(20, 5));
        assert_ne!(a.sentences(20, 5), a.sentences(20, 6));
        let spec = LanguageSpec::target();
        for s in a.sentences(50, 1) {
            assert!(s.chars().all(|c| c == ' ' || spec.alphabet.contains(&c)));
            let n = s.split(' ').count();
            assert!((spec.min_sentence_words..=spec.max_sentence_words).contains(&n));
        }
    }

    #[test]
    fn lexicon_is_unique_and_bounded() {
        let spec = LanguageSpec::source();
        let lang = SyntheticLanguage::new(spec.clone());
        assert_eq!(lang.lexicon().len(), spec.lexicon_size);
        let uniq: BTreeSet<_> = lang.lexicon().iter().collect();
        assert_eq!(uniq.len(), spec.lexicon_size);
        assert!(lang
            .lexicon()
            .iter()
            .all(|w| (spec.min_word_chars..=spec.max_word_chars).contains(&w.chars().count())));
    }
}
