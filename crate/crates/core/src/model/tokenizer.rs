//! Whitespace tokenizer with per-character fallback.
//!
//! Words seen in the training texts get their own id. Anything else is spelled
//! out as a first character `c` followed by continuation pieces `##c`, which
//! decode back without spaces. Reserved tokens are never split.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::prompts::{QG_TOKEN, RG_TOKEN};
use crate::types::SEP;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const RESERVED: [&str; 7] = [PAD, BOS, EOS, UNK, QG_TOKEN, RG_TOKEN, SEP];

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const CONT: &str = "##";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`: reserved tokens, then words with at
    /// least `min_count` occurrences (by descending count, then lexically), then
    /// the character pieces of every character seen.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                if RESERVED.contains(&w) {
                    continue;
                }
                *counts.entry(w).or_default() += 1;
                for c in w.chars() {
                    chars.insert(c, ());
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut add = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for (w, _) in words {
            add(w.to_string(), &mut tokens);
        }
        for c in chars.keys() {
            add(c.to_string(), &mut tokens);
            add(format!("{CONT}{c}"), &mut tokens);
        }
        Tokenizer::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode_word(&self, w: &str, out: &mut Vec<usize>) {
        if let Some(id) = self.id(w) {
            out.push(id);
            return;
        }
        for (i, c) in w.chars().enumerate() {
            let piece = if i == 0 { c.to_string() } else { format!("{CONT}{c}") };
            out.push(self.id(&piece).unwrap_or(UNK_ID));
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalisation;
    /// padding and sequence markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            let t = self.token(id);
            match t.strip_prefix(CONT) {
                Some(rest) if !rest.is_empty() && !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }
}
