//! Whole-word subword vocabulary with a 256-entry byte fallback.
//!
//! Id layout: the five specials, then learned subwords by descending corpus
//! frequency, then one id per byte value. A subword always begins a word; a
//! word with no matching subword prefix is spelled in bytes, preceded by the
//! space byte unless it opens the text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
pub const UNK: usize = 4;
pub const N_SPECIALS: usize = 5;
pub const N_BYTES: usize = 256;

const SPECIAL_NAMES: [&str; N_SPECIALS] = ["PAD", "BOS", "EOS", "CLS", "UNK"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    subwords: Vec<String>,
    lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, usize>,
    subwords: Vec<String>,
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Vocabulary {
    /// Most frequent lowercased words become subwords, up to `max_size`
    /// total entries; frequency ties are broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("vocabulary corpus is empty"));
        }
        let min = N_SPECIALS + N_BYTES;
        if max_size < min {
            return Err(Error::invalid(format!("vocabulary max_size {max_size} below the {min} reserved ids")));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            for w in doc.as_ref().to_lowercase().split_whitespace() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let subwords = ranked.into_iter().take(max_size - min).map(|(w, _)| w).collect();
        Ok(Self::from_subwords(subwords))
    }

    pub fn from_subwords(subwords: Vec<String>) -> Self {
        let lookup = subwords.iter().enumerate().map(|(i, w)| (w.clone(), N_SPECIALS + i)).collect();
        Vocabulary { subwords, lookup }
    }

    pub fn len(&self) -> usize {
        N_SPECIALS + self.subwords.len() + N_BYTES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn subword_id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn byte_id(&self, byte: u8) -> usize {
        N_SPECIALS + self.subwords.len() + byte as usize
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < N_SPECIALS
    }

    /// `[CLS, BOS, …, EOS]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS, BOS];
        ids.extend(self.encode_words(text));
        ids.push(EOS);
        ids
    }

    /// Token ids for the text body alone, without specials.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for (wi, word) in text.to_lowercase().split_whitespace().enumerate() {
            let bytes = word.as_bytes();
            match self.longest_prefix(bytes) {
                Some((id, len)) => {
                    ids.push(id);
                    ids.extend(bytes[len..].iter().map(|&b| self.byte_id(b)));
                }
                None => {
                    if wi > 0 {
                        ids.push(self.byte_id(b' '));
                    }
                    ids.extend(bytes.iter().map(|&b| self.byte_id(b)));
                }
            }
        }
        ids
    }

    fn longest_prefix(&self, word: &[u8]) -> Option<(usize, usize)> {
        (1..=word.len()).rev().find_map(|len| {
            let prefix = std::str::from_utf8(&word[..len]).ok()?;
            self.lookup.get(prefix).map(|&id| (id, len))
        })
    }

    /// Inverse of [`Self::tokenize`] up to [`normalize`]; specials are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out: Vec<u8> = Vec::new();
        let byte_base = N_SPECIALS + self.subwords.len();
        for &id in ids {
            if id >= self.len() {
                return Err(Error::TokenOutOfRange { id, size: self.len() });
            }
            if id < N_SPECIALS {
                continue;
            }
            if id < byte_base {
                if !out.is_empty() {
                    out.push(b' ');
                }
                out.extend_from_slice(self.subwords[id - N_SPECIALS].as_bytes());
            } else {
                out.push((id - byte_base) as u8);
            }
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            specials: SPECIAL_NAMES.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect(),
            subwords: self.subwords.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if file.specials.get(*name) != Some(&i) {
                return Err(Error::invalid(format!("{}: special {name} must have id {i}", path.display())));
            }
        }
        Ok(Self::from_subwords(file.subwords))
    }
}
