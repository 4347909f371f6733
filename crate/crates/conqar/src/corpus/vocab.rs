//! Tokenization and vocabulary.
//!
//! Tokenization is deliberately plain: lowercase, split on Unicode
//! whitespace, strip non-alphanumeric characters from token edges (interior
//! punctuation like the apostrophe in "don't" survives). The vocabulary
//! reserves three indices that no corpus token can ever occupy:
//! PAD = 0, DELIM = 1, UNK = 2.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::records::ReviewRecord;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const DELIM_ID: usize = 1;
pub const UNK_ID: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const DELIM_TOKEN: &str = "<delim>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase, whitespace-split, edge-punctuation-stripped tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ↔ dense-index map with the three reserved entries at the front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// On-disk vocabulary layout: the token list in index order.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// A vocabulary holding only the reserved tokens.
    pub fn reserved() -> Vocabulary {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for tok in [PAD_TOKEN, DELIM_TOKEN, UNK_TOKEN] {
            v.push(tok.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
    }

    /// Number of entries, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token, falling back to UNK for anything unseen.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token at an index, if the index is in range.
    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Map a token stream to ids (UNK for unknowns).
    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Serialize to the JSON file format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: 1,
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Vocabulary> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != 1 {
            return Err(Error::Format(format!(
                "vocabulary file version {} not supported",
                file.version
            )));
        }
        Vocabulary::from_tokens(file.tokens)
    }

    /// Rebuild from a full token list in index order, validating the
    /// reserved entries and the absence of duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let expected = [PAD_TOKEN, DELIM_TOKEN, UNK_TOKEN];
        if tokens.len() < 3 || tokens[..3] != expected {
            return Err(Error::Format(
                "vocabulary file does not start with the reserved <pad>/<delim>/<unk> entries"
                    .into(),
            ));
        }
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for tok in tokens {
            if v.index.contains_key(&tok) {
                return Err(Error::Format(format!("duplicate vocabulary token {:?}", tok)));
            }
            v.push(tok);
        }
        Ok(v)
    }

    /// All tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        Vocabulary::from_json(&fs::read_to_string(path)?)
    }
}

/// Build a vocabulary from the *training* records only.
///
/// Tokens with count >= `min_count` are indexed after the reserved slots,
/// ordered by descending count, ties broken lexicographically — so two
/// builds over the same records are identical.
pub fn build_vocab(train_records: &[ReviewRecord], min_count: u64) -> Vocabulary {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for rec in train_records {
        for tok in tokenize(&rec.text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    entries.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

    let mut vocab = Vocabulary::reserved();
    for (tok, _) in entries {
        vocab.push(tok);
    }
    vocab
}
