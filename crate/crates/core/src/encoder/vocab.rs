use std::collections::{BTreeMap, HashMap};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];

/// Word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary from regular words in the given order. Duplicates
    /// and reserved surface forms are skipped.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        for r in RESERVED {
            vocab
                .index
                .insert(r.to_string(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(r.to_string());
        }
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || vocab.index.contains_key(w) {
                continue;
            }
            vocab
                .index
                .insert(w.to_string(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(w.to_string());
        }
        vocab
    }

    /// Collects every word seen at least `min_freq` times, sorted
    /// lexicographically so the id assignment does not depend on corpus order.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        Self::from_words(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_freq.max(1))
                .map(|(w, _)| w),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved entries in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// Lowercases, splits on Unicode whitespace and trims non-alphanumeric
/// characters from both ends of every word. Words that trim to nothing are
/// dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// `[BOS, w₁ … wₖ, EOS]`, with middle words dropped when the sequence would
/// exceed `max_len`. `max_len` below 3 is raised to 3.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let ids: Vec<TokenId> = words(text).iter().map(|w| vocab.id(w)).collect();
    let room = max_len.max(3) - 2;
    let mut out = Vec::with_capacity(ids.len().min(room) + 2);
    out.push(BOS);
    if ids.len() <= room {
        out.extend_from_slice(&ids);
    } else {
        let head = room.div_ceil(2);
        let tail = room - head;
        out.extend_from_slice(&ids[..head]);
        out.extend_from_slice(&ids[ids.len() - tail..]);
    }
    out.push(EOS);
    out
}
