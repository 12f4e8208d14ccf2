//! Subword vocabularies: BPE merge learning, `##`-marked vocabulary
//! construction and greedy longest-match tokenization.
//!
//! Merges are learned on raw characters and then converted into a
//! BERT-style vocabulary where word-internal pieces carry the
//! [`CONTINUATION_PREFIX`]. Tokenization at runtime never replays merges;
//! it segments each word greedily against the vocabulary.

mod basic;
mod learn;
mod vocab;
mod wordpiece;

use std::path::PathBuf;

pub use basic::{basic_tokenize, count_word_frequencies, count_word_frequencies_in, WordFreqTable};
pub use learn::{build_vocab, learn_bpe, Merge, MergeList, DEFAULT_MIN_PAIR_FREQUENCY};
pub use vocab::{
    Vocabulary, CLS, CLS_ID, CONTINUATION_PREFIX, MASK, MASK_ID, NUM_SPECIALS, PAD, PAD_ID, SEP,
    SEP_ID, SPECIAL_TOKENS, UNK, UNK_ID,
};
pub use wordpiece::{
    segment_ids, tokenize_bytes, tokenize_text, tokenize_word, TokenSequence, TokenizerConfig,
    DEFAULT_MAX_WORD_CHARS,
};

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("word frequency table is empty")]
    EmptyFrequencies,
    #[error("invalid word {0:?}: words must be non-empty and free of whitespace")]
    InvalidWord(String),
    #[error("word {0:?} has a zero count")]
    ZeroCount(String),
    #[error("num_merges must be at least 1")]
    ZeroMerges,
    #[error("min_pair_frequency must be at least 1")]
    ZeroMinFrequency,
    #[error("target size {requested} is infeasible: specials and alphabet need at least {minimum} tokens")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}
