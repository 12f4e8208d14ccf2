use serde::{Deserialize, Serialize};

use super::{basic_tokenize, BpeError, Vocabulary, CONTINUATION_PREFIX, UNK, UNK_ID};

pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Lowercase before splitting. Off by default: vocabularies here are cased.
    pub lowercase: bool,
    /// Words longer than this (in chars) become a single `[UNK]`.
    pub max_word_chars: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: false,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        }
    }
}

/// Token ids with their surface strings, index-aligned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Greedy longest-match segmentation of `word`, returning token ids.
///
/// When `internal` is set the first piece is also looked up in its
/// continuation form, which is how a `##x` token is decomposed. Returns
/// `None` when some position has no matching token or the word exceeds
/// `max_word_chars`.
pub fn segment_ids(
    word: &str,
    vocab: &Vocabulary,
    max_word_chars: usize,
    internal: bool,
) -> Option<Vec<u32>> {
    // Byte offset of every char boundary, including the end.
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    if n_chars == 0 || n_chars > max_word_chars {
        return None;
    }
    let max_piece = vocab.max_piece_chars();
    let mut pieces = Vec::new();
    let mut candidate = String::with_capacity(word.len() + CONTINUATION_PREFIX.len());
    let mut start = 0;
    while start < n_chars {
        let prefixed = internal || start > 0;
        let mut end = n_chars.min(start + max_piece);
        let mut found = None;
        while end > start {
            candidate.clear();
            if prefixed {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Segments a single word; an unmatchable or over-long word is `["[UNK]"]`.
pub fn tokenize_word(word: &str, vocab: &Vocabulary, max_word_chars: usize) -> Vec<String> {
    match segment_ids(word, vocab, max_word_chars, false) {
        Some(ids) => ids
            .into_iter()
            .map(|id| vocab.token(id).expect("id from vocabulary").to_string())
            .collect(),
        None => vec![UNK.to_string()],
    }
}

/// Basic tokenization followed by per-word greedy segmentation.
pub fn tokenize_text(text: &str, vocab: &Vocabulary, config: &TokenizerConfig) -> TokenSequence {
    let mut out = TokenSequence::default();
    for word in basic_tokenize(text, config) {
        match segment_ids(&word, vocab, config.max_word_chars, false) {
            Some(ids) => {
                for id in ids {
                    out.ids.push(id);
                    out.surface.push(vocab.token(id).expect("id from vocabulary").to_string());
                }
            }
            None => {
                out.ids.push(UNK_ID);
                out.surface.push(UNK.to_string());
            }
        }
    }
    out
}

/// [`tokenize_text`] over raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(
    bytes: &[u8],
    vocab: &Vocabulary,
    config: &TokenizerConfig,
) -> Result<TokenSequence, BpeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| BpeError::InvalidUtf8 { line: 1 })?;
    Ok(tokenize_text(text, vocab, config))
}
