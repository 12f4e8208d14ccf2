use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::BpeError;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in id order. Every vocabulary starts with exactly these.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Marks a word-internal piece.
pub const CONTINUATION_PREFIX: &str = "##";

/// Ordered token list where the line index is the token id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    // Longest surface (continuation prefix stripped) in chars, bounds greedy matching.
    max_piece_chars: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// Builds a vocabulary from a full token list. The list must begin with
    /// the special tokens in their canonical order.
    pub fn new(tokens: Vec<String>) -> Result<Self, BpeError> {
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(t, s)| t != s)
        {
            return Err(BpeError::InvalidVocab(format!(
                "the first {NUM_SPECIALS} tokens must be {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut max_piece_chars = 1;
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(BpeError::InvalidVocab(format!("empty token at id {id}")));
            }
            if token.chars().any(char::is_whitespace) {
                return Err(BpeError::InvalidVocab(format!(
                    "token {token:?} at id {id} contains whitespace"
                )));
            }
            if id >= NUM_SPECIALS && SPECIAL_TOKENS.contains(&token.as_str()) {
                return Err(BpeError::InvalidVocab(format!(
                    "special token {token:?} repeated at id {id}"
                )));
            }
            if index.insert(token.clone(), id as u32).is_some() {
                return Err(BpeError::InvalidVocab(format!(
                    "duplicate token {token:?} at id {id}"
                )));
            }
            let surface = token.strip_prefix(CONTINUATION_PREFIX).unwrap_or(token);
            max_piece_chars = max_piece_chars.max(surface.chars().count());
        }
        Ok(Self {
            tokens,
            index,
            max_piece_chars,
        })
    }

    /// Builds a vocabulary from the non-special tokens; specials are prepended.
    pub fn from_regular_tokens<I, S>(regular: I) -> Result<Self, BpeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(regular.into_iter().map(Into::into))
            .collect();
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: a valid vocabulary holds at least the special tokens.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens after the special block, in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    pub fn is_special_id(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn is_special(token: &str) -> bool {
        SPECIAL_TOKENS.contains(&token)
    }

    pub(crate) fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Parses the one-token-per-line format. A trailing newline is optional.
    pub fn parse(text: &str) -> Result<Self, BpeError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(BpeError::InvalidVocab("vocabulary file is empty".into()));
        }
        Self::new(body.split('\n').map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.iter().map(|t| t.len() + 1).sum());
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, BpeError> {
        let text = fs::read_to_string(path).map_err(|source| BpeError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), BpeError> {
        fs::write(path, self.to_text()).map_err(|source| BpeError::File {
            path: path.to_path_buf(),
            source,
        })
    }
}
