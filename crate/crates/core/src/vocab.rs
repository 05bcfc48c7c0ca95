//! Token table for action strings, instructions and typed text.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{serialize_action, DeviceAction};

pub const BOS: u32 = 0;
pub const EOA: u32 = 1;
pub const IMG: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<bos>", "<eoa>", "<img>", "<pad>", "<unk>"];
const KEYWORDS: [&str; 13] = [
    "tap",
    "at",
    "swipe",
    "from",
    "to",
    "press",
    "back",
    "home",
    "enter",
    "complete",
    "impossible",
    "Input",
    "text",
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocab.json is not a token->id object: {0}")]
    Json(#[from] serde_json::Error),
    #[error("token ids are not dense from 0 (missing id {0})")]
    NotDense(u32),
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("special token {token:?} must have id {expected}")]
    Special { token: String, expected: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials, action keywords, bins `0`..`99`, printable ASCII and the
    /// given instruction words, in that order. Duplicates keep their first
    /// id.
    pub fn new<'a>(lexicon: impl IntoIterator<Item = &'a str>) -> Self {
        let bins: Vec<String> = (0..100).map(|b| b.to_string()).collect();
        let chars: Vec<String> = (0x20u8..=0x7e).map(|c| (c as char).to_string()).collect();
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let all = SPECIALS
            .iter()
            .copied()
            .chain(KEYWORDS.iter().copied())
            .chain(bins.iter().map(String::as_str))
            .chain(chars.iter().map(String::as_str))
            .chain(lexicon.into_iter().map(|w| -> &str { w }));
        for t in all {
            if !index.contains_key(t) {
                index.insert(t.to_owned(), tokens.len() as u32);
                tokens.push(t.to_owned());
            }
        }
        Self { tokens, index }
    }

    /// The vocabulary used with generated corpora.
    pub fn standard() -> Self {
        Self::new(crate::synthetic::instruction_lexicon())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    /// `{"token": id, ...}` with keys sorted.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.index.iter().map(|(t, i)| (t.as_str(), *i)).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let map: BTreeMap<String, u32> = serde_json::from_str(s)?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in &map {
            match tokens.get_mut(*id as usize) {
                Some(slot @ None) => *slot = Some(t.clone()),
                Some(Some(_)) => return Err(VocabError::Duplicate(t.clone())),
                None => return Err(VocabError::NotDense(*id)),
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.expect("dense ids fill every slot"))
            .collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s) {
                return Err(VocabError::Special {
                    token: (*s).to_owned(),
                    expected: i as u32,
                });
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }

    /// Hex sha256 of [`Vocab::to_json`].
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        crate::episode::hex_digest(h)
    }

    /// Token ids of the action string, terminated by EOA. Word tokens
    /// outside quotes, one token per character inside; characters outside
    /// printable ASCII become UNK.
    pub fn tokenize_action(&self, a: &DeviceAction) -> Vec<u32> {
        let s = serialize_action(a);
        let s = s.as_str();
        let mut out = Vec::with_capacity(8);
        match s.find('"') {
            None => out.extend(s.split(' ').map(|w| self.id_or_unk(w))),
            Some(q) => {
                out.extend(s[..q].split_whitespace().map(|w| self.id_or_unk(w)));
                let mut buf = [0u8; 4];
                out.extend(
                    s[q..]
                        .chars()
                        .map(|c| self.id_or_unk(c.encode_utf8(&mut buf))),
                );
            }
        }
        out.push(EOA);
        out
    }

    /// Inverse of [`Vocab::tokenize_action`] up to the first EOA (or the
    /// end). Returns `None` for ids outside the vocabulary or specials.
    pub fn detokenize(&self, ids: &[u32]) -> Option<String> {
        let mut out = String::new();
        let mut in_quote = false;
        let mut escaped = false;
        for &id in ids {
            if id == EOA {
                break;
            }
            if (id as usize) < SPECIALS.len() {
                return None;
            }
            let t = self.token(id)?;
            if in_quote {
                out.push_str(t);
                if escaped {
                    escaped = false;
                } else if t == "\\" {
                    escaped = true;
                } else if t == "\"" {
                    in_quote = false;
                }
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(t);
                in_quote = t == "\"";
            }
        }
        Some(out)
    }

    /// Known words become single tokens, anything else is spelled out
    /// character by character.
    pub fn tokenize_instruction(&self, instruction: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in instruction.split_whitespace() {
            match self.id(w) {
                Some(id) if id as usize >= SPECIALS.len() => out.push(id),
                _ => {
                    let mut buf = [0u8; 4];
                    out.extend(w.chars().map(|c| self.id_or_unk(c.encode_utf8(&mut buf))));
                }
            }
        }
        out
    }
}
