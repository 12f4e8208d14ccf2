use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use unicode_categories::UnicodeCategories;

use super::{BpeError, TokenizerConfig};

fn is_punctuation(ch: char) -> bool {
    ch.is_ascii_punctuation() || ch.is_punctuation()
}

/// Splits on Unicode whitespace and isolates every punctuation character as
/// its own word. Lowercases only when the config asks for it.
pub fn basic_tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let mut words = Vec::new();
    let mut push = |s: &str| {
        if config.lowercase {
            words.push(s.to_lowercase());
        } else {
            words.push(s.to_string());
        }
    };
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in chunk.char_indices() {
            if is_punctuation(ch) {
                if start < i {
                    push(&chunk[start..i]);
                }
                push(&chunk[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < chunk.len() {
            push(&chunk[start..]);
        }
    }
    words
}

/// Word counts over a corpus. Keys are non-empty and whitespace-free, counts
/// are at least one. Ordered so iteration and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordFreqTable {
    entries: BTreeMap<String, u64>,
}

impl WordFreqTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` occurrences of `word`.
    pub fn add(&mut self, word: &str, count: u64) -> Result<(), BpeError> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(BpeError::InvalidWord(word.to_string()));
        }
        if count == 0 {
            return Err(BpeError::ZeroCount(word.to_string()));
        }
        *self.entries.entry(word.to_string()).or_insert(0) += count;
        Ok(())
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, BpeError>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: AsRef<str>,
    {
        let mut table = Self::new();
        for (word, count) in pairs {
            table.add(word.as_ref(), count)?;
        }
        Ok(table)
    }

    pub fn get(&self, word: &str) -> Option<u64> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total word occurrences.
    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(w, &c)| (w.as_str(), c))
    }

    /// Adds every count of `other` into `self`.
    pub fn merge(&mut self, other: &WordFreqTable) {
        for (word, &count) in &other.entries {
            *self.entries.entry(word.clone()).or_insert(0) += count;
        }
    }

    /// Weighted mixture of several tables. Each source is rescaled so that it
    /// contributes `weight` of the combined mass, where the combined mass is
    /// the sum of the raw totals. Per-source scaled counts are rounded to the
    /// nearest integer, and a word present in a source never rounds below 1.
    pub fn mix(sources: &[(&WordFreqTable, f64)]) -> Result<Self, BpeError> {
        let grand_total: u64 = sources.iter().map(|(t, _)| t.total()).sum();
        let mut out = Self::new();
        for (table, weight) in sources {
            let total = table.total();
            if total == 0 {
                continue;
            }
            let scale = weight * grand_total as f64 / total as f64;
            for (word, count) in table.iter() {
                let scaled = ((count as f64) * scale).round().max(1.0) as u64;
                out.add(word, scaled)?;
            }
        }
        Ok(out)
    }

    /// Parses the `word<TAB>count` cache format.
    pub fn parse_tsv(text: &str) -> Result<Self, BpeError> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| BpeError::Parse {
                line: i + 1,
                message: "expected word<TAB>count".into(),
            })?;
            let count: u64 = count.parse().map_err(|_| BpeError::Parse {
                line: i + 1,
                message: format!("invalid count {count:?}"),
            })?;
            table.add(word, count)?;
        }
        Ok(table)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (word, count) in self.iter() {
            out.push_str(word);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn read_tsv(path: &Path) -> Result<Self, BpeError> {
        let text = std::fs::read_to_string(path).map_err(|source| BpeError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_tsv(&text)
    }
}

/// Counts basic-tokenizer words over a line stream. Lines are decoded one at
/// a time so an invalid byte sequence is reported with its 1-based line
/// number; read failures carry the byte offset reached so far.
pub fn count_word_frequencies<R: BufRead>(
    mut reader: R,
    config: &TokenizerConfig,
) -> Result<WordFreqTable, BpeError> {
    let mut table = WordFreqTable::new();
    let mut buf = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| BpeError::Io { offset, source })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        offset += n as u64;
        let line = std::str::from_utf8(&buf).map_err(|_| BpeError::InvalidUtf8 { line: line_no })?;
        for word in basic_tokenize(line, config) {
            *table.entries.entry(word).or_insert(0) += 1;
        }
    }
    Ok(table)
}

/// Parallel counting over in-memory lines; partial tables are merged by
/// addition, so the result equals the sequential count.
pub fn count_word_frequencies_in<S: AsRef<str> + Sync>(
    lines: &[S],
    config: &TokenizerConfig,
) -> WordFreqTable {
    lines
        .par_chunks(1024)
        .map(|chunk| {
            let mut table = WordFreqTable::new();
            for line in chunk {
                for word in basic_tokenize(line.as_ref(), config) {
                    *table.entries.entry(word).or_insert(0) += 1;
                }
            }
            table
        })
        .reduce(WordFreqTable::new, |mut a, b| {
            a.merge(&b);
            a
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(text: &str) -> Vec<(String, u64)> {
        let t = count_word_frequencies(text.as_bytes(), &TokenizerConfig::default()).unwrap();
        t.iter().map(|(w, c)| (w.to_string(), c)).collect()
    }

    #[test]
    fn counts_words() {
        assert_eq!(counts("a b a"), vec![("a".into(), 2), ("b".into(), 1)]);
        assert_eq!(counts("low low lower"), vec![("low".into(), 2), ("lower".into(), 1)]);
    }

    #[test]
    fn punctuation_becomes_its_own_word() {
        assert_eq!(counts("end."), vec![(".".into(), 1), ("end".into(), 1)]);
        assert_eq!(
            basic_tokenize("«Да», сказал он!", &TokenizerConfig::default()),
            vec!["«", "Да", "»", ",", "сказал", "он", "!"]
        );
    }

    #[test]
    fn lowercasing_is_opt_in() {
        let cased = TokenizerConfig::default();
        assert_eq!(basic_tokenize("Low.", &cased), vec!["Low", "."]);
        let lower = TokenizerConfig {
            lowercase: true,
            ..cased
        };
        assert_eq!(basic_tokenize("Low.", &lower), vec!["low", "."]);
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let data: &[u8] = b"ok line\nbad \xff byte\n";
        match count_word_frequencies(data, &TokenizerConfig::default()) {
            Err(BpeError::InvalidUtf8 { line }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn io_failure_reports_offset() {
        struct Failing(usize);
        impl std::io::Read for Failing {
            fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
                if self.0 == 0 {
                    return Err(std::io::Error::other("disk gone"));
                }
                let data = b"abc\n";
                buf[..4].copy_from_slice(data);
                self.0 -= 1;
                Ok(4)
            }
        }
        let reader = std::io::BufReader::new(Failing(2));
        match count_word_frequencies(reader, &TokenizerConfig::default()) {
            Err(BpeError::Io { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parallel_count_matches_sequential() {
        let lines: Vec<String> = (0..5000).map(|i| format!("w{} x{} w{}.", i % 7, i % 3, i % 5)).collect();
        let joined = lines.join("\n");
        let seq = count_word_frequencies(joined.as_bytes(), &TokenizerConfig::default()).unwrap();
        let par = count_word_frequencies_in(&lines, &TokenizerConfig::default());
        assert_eq!(seq, par);
        assert_eq!(seq.total(), 5000 * 4);
    }

    #[test]
    fn table_rejects_bad_entries() {
        let mut t = WordFreqTable::new();
        assert!(t.add("", 1).is_err());
        assert!(t.add("a b", 1).is_err());
        assert!(t.add("a", 0).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let t = WordFreqTable::from_pairs([("low", 5), ("lower", 2)]).unwrap();
        assert_eq!(WordFreqTable::parse_tsv(&t.to_tsv()).unwrap(), t);
        assert!(WordFreqTable::parse_tsv("low 5\n").is_err());
    }

    #[test]
    fn mix_rescales_each_source() {
        // a: total 10, b: total 30, combined mass 40.
        let a = WordFreqTable::from_pairs([("x", 10)]).unwrap();
        let b = WordFreqTable::from_pairs([("y", 20), ("x", 10)]).unwrap();
        let m = WordFreqTable::mix(&[(&a, 0.8), (&b, 0.2)]).unwrap();
        // a: 10 * 0.8 * 40 / 10 = 32; b: y = 20 * 0.2 * 40 / 30 = 5.33 -> 5, x = 2.67 -> 3
        assert_eq!(m.get("x"), Some(35));
        assert_eq!(m.get("y"), Some(5));
    }
}
