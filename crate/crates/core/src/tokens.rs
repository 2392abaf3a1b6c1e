//! Token sequences, tokenizers, queries and decoding parameters.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A tokenized string. `ends[i]` is the byte offset in `text` where token `i`
/// stops, so any prefix can be sliced back to text without the tokenizer.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    ends: Vec<usize>,
    text: String,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a sequence from text pieces; the text is their concatenation.
    pub fn from_pieces<'a, I>(pieces: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seq = Self::default();
        for piece in pieces {
            seq.push_piece(piece);
        }
        seq
    }

    fn push_piece(&mut self, piece: &str) {
        self.text.push_str(piece);
        self.ids.push(piece_id(piece));
        self.ends.push(self.text.len());
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Text of token `i`.
    pub fn piece(&self, i: usize) -> &str {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        &self.text[start..self.ends[i]]
    }

    /// The first `n` tokens.
    pub fn prefix(&self, n: usize) -> Result<TokenSequence> {
        if n > self.len() {
            return Err(Error::Bounds { requested: n as i64, len: self.len() });
        }
        let cut = if n == 0 { 0 } else { self.ends[n - 1] };
        Ok(TokenSequence {
            ids: self.ids[..n].to_vec(),
            ends: self.ends[..n].to_vec(),
            text: self.text[..cut].to_string(),
        })
    }

    /// Signed variant of [`prefix`](Self::prefix) for callers holding raw integers.
    pub fn prefix_checked(&self, n: i64) -> Result<TokenSequence> {
        if n < 0 {
            return Err(Error::Bounds { requested: n, len: self.len() });
        }
        self.prefix(n as usize)
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let shift = self.text.len();
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.ends.extend(other.ends.iter().map(|e| e + shift));
        out.text.push_str(&other.text);
        out
    }
}

impl fmt::Debug for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenSequence")
            .field("len", &self.len())
            .field("text", &self.text)
            .finish()
    }
}

// Sequences travel as plain text and are re-tokenized with the built-in
// tokenizer on load.
impl Serialize for TokenSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for TokenSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Ok(PieceTokenizer.tokenize(&text))
    }
}

/// FNV-1a over the piece bytes. Ids are stable across processes, which is all
/// the cost formulas and mocks need.
fn piece_id(piece: &str) -> TokenId {
    let mut h: u32 = 0x811c_9dc5;
    for b in piece.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;

    fn tokenize(&self, text: &str) -> TokenSequence;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Whitespace-plus-punctuation piece tokenizer.
///
/// A piece is an optional run of leading whitespace followed by either a
/// maximal run of word characters or a single other character. Whitespace at
/// the very end of the text forms its own piece. Pieces cover the input
/// exactly, so `tokenize(s).text() == s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PieceTokenizer;

pub const BUILTIN_TOKENIZER: &str = "builtin";

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl PieceTokenizer {
    fn for_each_piece<'a>(text: &'a str, f: impl FnMut(&'a str)) {
        if text.is_ascii() {
            Self::for_each_ascii_piece(text, f)
        } else {
            Self::for_each_unicode_piece(text, f)
        }
    }

    /// Byte-level twin of [`Self::for_each_unicode_piece`] for ASCII input.
    fn for_each_ascii_piece<'a>(text: &'a str, mut f: impl FnMut(&'a str)) {
        let b = text.as_bytes();
        let word = |c: u8| c.is_ascii_alphanumeric() || c == b'_';
        // same set as `char::is_whitespace` restricted to ASCII
        let space = |c: u8| matches!(c, b'\t' | b'\n' | 0x0b | 0x0c | b'\r' | b' ');
        let mut i = 0;
        while i < b.len() {
            let start = i;
            while i < b.len() && space(b[i]) {
                i += 1;
            }
            if i < b.len() {
                let c = b[i];
                i += 1;
                if word(c) {
                    while i < b.len() && word(b[i]) {
                        i += 1;
                    }
                }
            }
            f(&text[start..i]);
        }
    }

    fn for_each_unicode_piece<'a>(text: &'a str, mut f: impl FnMut(&'a str)) {
        let bytes_len = text.len();
        let mut iter = text.char_indices().peekable();
        while let Some(&(start, _)) = iter.peek() {
            while matches!(iter.peek(), Some(&(_, c)) if c.is_whitespace()) {
                iter.next();
            }
            match iter.next() {
                None => {
                    f(&text[start..bytes_len]);
                    break;
                }
                Some((_, c)) if is_word(c) => {
                    while matches!(iter.peek(), Some(&(_, c)) if is_word(c)) {
                        iter.next();
                    }
                }
                Some(_) => {}
            }
            let end = iter.peek().map_or(bytes_len, |&(i, _)| i);
            f(&text[start..end]);
        }
    }
}

impl Tokenizer for PieceTokenizer {
    fn id(&self) -> &str {
        BUILTIN_TOKENIZER
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        Self::for_each_piece(text, |p| seq.push_piece(p));
        seq
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        Self::for_each_piece(text, |_| n += 1);
        n
    }
}

#[derive(Clone)]
pub struct TokenizerRegistry {
    entries: HashMap<String, Arc<dyn Tokenizer>>,
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut entries: HashMap<String, Arc<dyn Tokenizer>> = HashMap::new();
        entries.insert(BUILTIN_TOKENIZER.to_string(), Arc::new(PieceTokenizer));
        Self { entries }
    }
}

impl TokenizerRegistry {
    pub fn register(&mut self, tokenizer: Arc<dyn Tokenizer>) {
        self.entries.insert(tokenizer.id().to_string(), tokenizer);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Tokenizer>> {
        self.entries
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownTokenizer(id.to_string()))
    }

    pub fn token_count(&self, text: &str, tokenizer: &str) -> Result<usize> {
        Ok(self.get(tokenizer)?.count(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    MathNumeric,
    Code,
    Freeform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: TokenSequence,
    #[serde(default)]
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl Query {
    pub fn new(
        id: impl Into<String>,
        text: &str,
        task_kind: TaskKind,
        ground_truth: Option<String>,
    ) -> Result<Self> {
        let prompt = PieceTokenizer.tokenize(text);
        if prompt.is_empty() {
            return Err(Error::InvalidParams("query prompt is empty".into()));
        }
        Ok(Self { id: id.into(), prompt, task_kind, ground_truth })
    }

    pub fn text(&self) -> &str {
        self.prompt.text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DecodingParams {
    /// Greedy decoding, as used for hint generation and labeling.
    pub fn deterministic(max_new_tokens: usize) -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_new_tokens, seed: None }
    }

    pub fn sampled(temperature: f64, top_p: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self { temperature, top_p, max_new_tokens, seed: Some(seed) }
    }

    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParams(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParams(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.max_new_tokens > n_max {
            return Err(Error::InvalidParams(format!(
                "max_new_tokens {} exceeds limit {}",
                self.max_new_tokens, n_max
            )));
        }
        Ok(())
    }
}
