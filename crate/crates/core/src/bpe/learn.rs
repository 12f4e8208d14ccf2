use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::{BpeError, Vocabulary, WordFreqTable, CONTINUATION_PREFIX, SPECIAL_TOKENS};

pub const DEFAULT_MIN_PAIR_FREQUENCY: u64 = 2;

const MERGES_HEADER: &str = "#version: bpe-1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Merge {
    pub left: String,
    pub right: String,
}

impl Merge {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Self {
        Self {
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn merged(&self) -> String {
        let mut s = String::with_capacity(self.left.len() + self.right.len());
        s.push_str(&self.left);
        s.push_str(&self.right);
        s
    }
}

/// Merge operations in learning order; index is the merge rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeList {
    merges: Vec<Merge>,
}

impl MergeList {
    pub fn new(merges: Vec<Merge>) -> Result<Self, BpeError> {
        let mut seen = HashSet::with_capacity(merges.len());
        for (rank, m) in merges.iter().enumerate() {
            if m.left.is_empty() || m.right.is_empty() {
                return Err(BpeError::Parse {
                    line: rank + 2,
                    message: "empty merge symbol".into(),
                });
            }
            if !seen.insert(m) {
                return Err(BpeError::Parse {
                    line: rank + 2,
                    message: format!("duplicate merge ({:?}, {:?})", m.left, m.right),
                });
            }
        }
        Ok(Self { merges })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Merge> {
        self.merges.iter()
    }

    pub fn as_slice(&self) -> &[Merge] {
        &self.merges
    }

    /// `#version: bpe-1` header, then one `left right` line per merge.
    pub fn to_text(&self) -> String {
        let mut out = String::from(MERGES_HEADER);
        out.push('\n');
        for m in &self.merges {
            out.push_str(&m.left);
            out.push(' ');
            out.push_str(&m.right);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines();
        if lines.next() != Some(MERGES_HEADER) {
            return Err(BpeError::Parse {
                line: 1,
                message: format!("expected header {MERGES_HEADER:?}"),
            });
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(BpeError::Parse {
                    line: i + 2,
                    message: format!("expected \"left right\", got {line:?}"),
                });
            }
            merges.push(Merge::new(parts[0], parts[1]));
        }
        Self::new(merges)
    }

    pub fn read(path: &Path) -> Result<Self, BpeError> {
        let text = std::fs::read_to_string(path).map_err(|source| BpeError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), BpeError> {
        std::fs::write(path, self.to_text()).map_err(|source| BpeError::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

type Pair = (u32, u32);

struct SymbolTable {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = Pair> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn apply_merge(symbols: &[u32], pair: Pair, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Learns BPE merges over character sequences, weighting each word by its
/// count. The most frequent adjacent pair wins; ties go to the
/// lexicographically smallest `(left, right)`. Stops after `num_merges`
/// merges or once the best pair occurs fewer than `min_pair_frequency` times.
pub fn learn_bpe(
    freqs: &WordFreqTable,
    num_merges: usize,
    min_pair_frequency: u64,
) -> Result<MergeList, BpeError> {
    if freqs.is_empty() {
        return Err(BpeError::EmptyFrequencies);
    }
    if num_merges == 0 {
        return Err(BpeError::ZeroMerges);
    }
    if min_pair_frequency == 0 {
        return Err(BpeError::ZeroMinFrequency);
    }

    let mut table = SymbolTable {
        names: Vec::new(),
        ids: HashMap::new(),
    };
    let mut words: Vec<(Vec<u32>, i64)> = Vec::with_capacity(freqs.len());
    let mut char_buf = [0u8; 4];
    for (word, count) in freqs.iter() {
        let symbols = word
            .chars()
            .map(|c| table.intern(c.encode_utf8(&mut char_buf)))
            .collect();
        words.push((symbols, count as i64));
    }

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (idx, (symbols, count)) in words.iter().enumerate() {
        for pair in pairs_of(symbols) {
            *pair_counts.entry(pair).or_insert(0) += count;
            pair_words.entry(pair).or_default().insert(idx);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Reversed so the lexicographically smaller pair is the maximum.
                    (table.name(b.0), table.name(b.1)).cmp(&(table.name(a.0), table.name(a.1)))
                })
            })
            .map(|(&p, &c)| (p, c));
        let Some((pair, count)) = best else { break };
        if (count as u64) < min_pair_frequency {
            break;
        }

        let merge = Merge::new(table.name(pair.0), table.name(pair.1));
        let merged = table.intern(&merge.merged());
        merges.push(merge);

        let mut affected: Vec<usize> = pair_words
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for idx in affected {
            let (symbols, count) = &words[idx];
            let count = *count;
            if !pairs_of(symbols).any(|p| p == pair) {
                continue;
            }
            for p in pairs_of(symbols) {
                *pair_counts.entry(p).or_insert(0) -= count;
            }
            let updated = apply_merge(symbols, pair, merged);
            for p in pairs_of(&updated) {
                *pair_counts.entry(p).or_insert(0) += count;
                if p != pair {
                    pair_words.entry(p).or_default().insert(idx);
                }
            }
            words[idx].0 = updated;
        }
        pair_counts.remove(&pair);
    }

    MergeList::new(merges)
}

fn continuation(symbol: &str) -> String {
    let mut s = String::with_capacity(CONTINUATION_PREFIX.len() + symbol.len());
    s.push_str(CONTINUATION_PREFIX);
    s.push_str(symbol);
    s
}

/// Converts merges into a `##`-marked vocabulary: specials, then the
/// observed alphabet (word-initial forms sorted, then continuation forms
/// sorted), then merged symbols in merge-rank order in whichever positional
/// forms the merge produced while replaying it over the training words.
/// The result is truncated to `target_size`.
pub fn build_vocab(
    merges: &MergeList,
    freqs: &WordFreqTable,
    target_size: usize,
) -> Result<Vocabulary, BpeError> {
    let mut initial_chars = std::collections::BTreeSet::new();
    let mut inner_chars = std::collections::BTreeSet::new();
    let mut words: Vec<Vec<String>> = Vec::with_capacity(freqs.len());
    for (word, _) in freqs.iter() {
        let symbols: Vec<String> = word.chars().map(String::from).collect();
        for (i, s) in symbols.iter().enumerate() {
            if i == 0 {
                initial_chars.insert(s.clone());
            } else {
                inner_chars.insert(continuation(s));
            }
        }
        words.push(symbols);
    }

    let minimum = SPECIAL_TOKENS.len() + initial_chars.len() + inner_chars.len();
    if target_size < minimum {
        return Err(BpeError::VocabTooSmall {
            requested: target_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(initial_chars);
    tokens.extend(inner_chars);
    let mut present: HashSet<String> = tokens.iter().cloned().collect();

    for merge in merges.iter() {
        if tokens.len() >= target_size {
            break;
        }
        let merged = merge.merged();
        let (mut at_start, mut inside) = (false, false);
        for symbols in words.iter_mut() {
            if !symbols
                .windows(2)
                .any(|w| w[0] == merge.left && w[1] == merge.right)
            {
                continue;
            }
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == merge.left && symbols[i + 1] == merge.right {
                    if out.is_empty() {
                        at_start = true;
                    } else {
                        inside = true;
                    }
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        let mut forms = Vec::with_capacity(2);
        if at_start {
            forms.push(merged.clone());
        }
        if inside {
            forms.push(continuation(&merged));
        }
        for form in forms {
            if tokens.len() < target_size && present.insert(form.clone()) {
                tokens.push(form);
            }
        }
    }

    Vocabulary::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(list: &MergeList) -> Vec<(&str, &str)> {
        list.iter().map(|m| (m.left.as_str(), m.right.as_str())).collect()
    }

    fn freqs(items: &[(&str, u64)]) -> WordFreqTable {
        WordFreqTable::from_pairs(items.iter().copied()).unwrap()
    }

    #[test]
    fn single_pair() {
        let m = learn_bpe(&freqs(&[("ab", 5)]), 1, 2).unwrap();
        assert_eq!(pairs(&m), vec![("a", "b")]);
    }

    #[test]
    fn tie_goes_to_lexicographically_smaller_pair() {
        let m = learn_bpe(&freqs(&[("ab", 3), ("cd", 3)]), 1, 2).unwrap();
        assert_eq!(pairs(&m), vec![("a", "b")]);
        let m = learn_bpe(&freqs(&[("cd", 3), ("ab", 3)]), 2, 2).unwrap();
        assert_eq!(pairs(&m), vec![("a", "b"), ("c", "d")]);
    }

    #[test]
    fn hand_traced_corpus() {
        // es/st tie at 9 -> (e,s); (es,t) 9; lo/ow tie at 7 -> (l,o); (lo,w) 7.
        let f = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = learn_bpe(&f, 4, 2).unwrap();
        assert_eq!(pairs(&m), vec![("e", "s"), ("es", "t"), ("l", "o"), ("lo", "w")]);
    }

    #[test]
    fn stops_below_min_frequency() {
        let f = freqs(&[("ab", 1), ("cd", 1)]);
        assert!(learn_bpe(&f, 10, 2).unwrap().is_empty());
        assert_eq!(learn_bpe(&f, 10, 1).unwrap().len(), 2);
    }

    #[test]
    fn overlapping_runs_merge_left_to_right() {
        // "aaa": (a,a) counted twice; merge gives [aa, a].
        let m = learn_bpe(&freqs(&[("aaa", 2)]), 5, 2).unwrap();
        assert_eq!(pairs(&m), vec![("a", "a"), ("aa", "a")]);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(learn_bpe(&WordFreqTable::new(), 1, 2), Err(BpeError::EmptyFrequencies)));
        assert!(matches!(learn_bpe(&freqs(&[("ab", 1)]), 0, 2), Err(BpeError::ZeroMerges)));
    }

    #[test]
    fn vocab_from_single_merge() {
        let m = MergeList::new(vec![Merge::new("a", "b")]).unwrap();
        let v = build_vocab(&m, &freqs(&[("ab", 1)]), 100).unwrap();
        assert_eq!(&v.tokens()[5..], &["a", "##b", "ab"]);
    }

    #[test]
    fn vocab_alphabet_only() {
        let v = build_vocab(&MergeList::default(), &freqs(&[("a", 1)]), 100).unwrap();
        assert_eq!(&v.tokens()[5..], &["a"]);
    }

    #[test]
    fn vocab_truncation_boundary() {
        let f = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = learn_bpe(&f, 4, 2).unwrap();
        // initial: l n w; inner: ##d ##e ##i ##o ##r ##s ##t ##w
        let minimum = 5 + 3 + 8;
        let v = build_vocab(&m, &f, minimum).unwrap();
        assert_eq!(v.len(), minimum);
        match build_vocab(&m, &f, minimum - 1) {
            Err(BpeError::VocabTooSmall { minimum: reported, .. }) => assert_eq!(reported, minimum),
            other => panic!("unexpected {other:?}"),
        }
        let full = build_vocab(&m, &f, 1000).unwrap();
        assert_eq!(&full.tokens()[minimum..], &["##es", "##est", "lo", "low"]);
    }

    #[test]
    fn merge_seen_in_both_positions_yields_both_forms() {
        let f = freqs(&[("abab", 3)]);
        let m = MergeList::new(vec![Merge::new("a", "b")]).unwrap();
        let v = build_vocab(&m, &f, 100).unwrap();
        assert!(v.contains("ab") && v.contains("##ab"));
    }

    #[test]
    fn merges_file_round_trip_and_errors() {
        let m = MergeList::new(vec![Merge::new("a", "b"), Merge::new("ab", "c")]).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("#version: bpe-1\n"));
        assert_eq!(MergeList::parse(&text).unwrap(), m);
        assert!(MergeList::parse("a b\n").is_err());
        assert!(MergeList::parse("#version: bpe-1\na  b\n").is_err());
        assert!(MergeList::parse("#version: bpe-1\na b\na b\n").is_err());
    }
}
