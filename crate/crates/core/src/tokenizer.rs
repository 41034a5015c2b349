//! Word-level tokenizer: lowercased words, punctuation split into single
//! tokens, and a frequency-built vocabulary with reserved special ids.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const MASK: TokenId = 2;
pub const LM_MASK: TokenId = 3;
pub const PAD: TokenId = 4;
pub const UNK: TokenId = 5;

/// Surface strings of the special tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; 6] = ["[CLS]", "[SEP]", "[MASK]", "[LM-MASK]", "[PAD]", "[UNK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

const VOCAB_FORMAT: &str = "reviser-vocab";
const VOCAB_VERSION: u32 = 1;

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Token ids with `[CLS]` at position 0 and nowhere else.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::InvalidSequence("position 0 must hold [CLS]".into()));
        }
        if ids[1..].contains(&CLS) {
            return Err(Error::InvalidSequence(
                "[CLS] may only appear at position 0".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<TokenId> {
        self.ids.get(pos).copied()
    }

    /// Positions holding ordinary (non-special) tokens.
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !is_special(id))
            .map(|(i, _)| i)
    }

    /// Replaces `ids[start..start+len]` with `replacement`.
    pub fn splice(&self, start: usize, len: usize, replacement: &[TokenId]) -> Result<Self> {
        if start == 0 || start + len > self.ids.len() {
            return Err(Error::InvalidSpan {
                start,
                len,
                seq_len: self.ids.len(),
            });
        }
        let mut ids = Vec::with_capacity(self.ids.len() - len + replacement.len());
        ids.extend_from_slice(&self.ids[..start]);
        ids.extend_from_slice(replacement);
        ids.extend_from_slice(&self.ids[start + len..]);
        Self::new(ids)
    }
}

impl TryFrom<Vec<TokenId>> for TokenSequence {
    type Error = Error;

    fn try_from(ids: Vec<TokenId>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<TokenSequence> for Vec<TokenId> {
    fn from(seq: TokenSequence) -> Self {
        seq.ids
    }
}

/// A lowercased word or punctuation mark plus whether its source form
/// started with an uppercase letter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub capitalized: bool,
}

/// Splits on whitespace; every non-alphanumeric, non-apostrophe character
/// becomes its own token.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut capitalized = false;
    let flush = |current: &mut String, capitalized: &mut bool, words: &mut Vec<Word>| {
        if !current.is_empty() {
            words.push(Word {
                text: std::mem::take(current),
                capitalized: *capitalized,
            });
        }
        *capitalized = false;
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            if current.is_empty() {
                capitalized = ch.is_uppercase();
            }
            current.extend(ch.to_lowercase());
        } else {
            flush(&mut current, &mut capitalized, &mut words);
            if !ch.is_whitespace() {
                words.push(Word {
                    text: ch.to_lowercase().collect(),
                    capitalized: false,
                });
            }
        }
    }
    flush(&mut current, &mut capitalized, &mut words);
    words
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    specials: Vec<String>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_freq` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for w in split_words(line) {
                *counts.entry(w.text).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
    }

    /// Builds a vocabulary from ordinary tokens; specials are prepended.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ordinary tokens in id order.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL..]
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_cased(text).0
    }

    /// Encodes `text` and reports, per position, whether the source word was
    /// capitalized. `[CLS]` and `[SEP]` are never capitalized.
    pub fn encode_cased(&self, text: &str) -> (TokenSequence, Vec<bool>) {
        let words = split_words(text);
        let mut ids = Vec::with_capacity(words.len() + 2);
        let mut caps = Vec::with_capacity(words.len() + 2);
        ids.push(CLS);
        caps.push(false);
        for w in words {
            ids.push(self.id(&w.text).unwrap_or(UNK));
            caps.push(w.capitalized);
        }
        ids.push(SEP);
        caps.push(false);
        (TokenSequence { ids }, caps)
    }

    /// Joins tokens with single spaces. `[CLS]`, `[SEP]` and `[PAD]` are
    /// dropped; the two mask tokens render as `_` and `[UNK]` as `<unk>`, so
    /// no special surface string ever reaches the output.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let piece = match id {
                CLS | SEP | PAD => continue,
                MASK | LM_MASK => "_",
                UNK => "<unk>",
                other => self.token(other).unwrap_or("<unk>"),
            };
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            tokens: self.ordinary_tokens().to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.format != VOCAB_FORMAT {
            return Err(Error::Format(format!(
                "not a vocabulary file: {:?}",
                file.format
            )));
        }
        if file.version != VOCAB_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: VOCAB_VERSION,
            });
        }
        if file.specials != SPECIAL_TOKENS {
            return Err(Error::Format("special-token block does not match".into()));
        }
        if let Some(bad) = file
            .tokens
            .iter()
            .find(|t| SPECIAL_TOKENS.contains(&t.as_str()))
        {
            return Err(Error::Format(format!(
                "special token {bad:?} in ordinary block"
            )));
        }
        Self::from_tokens(file.tokens)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocabulary({} tokens)", self.tokens.len())
    }
}
