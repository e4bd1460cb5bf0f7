//! Word-level tokenizer.
//!
//! Splits on whitespace, with every punctuation character becoming its own
//! token. The vocabulary is built from the ingested corpus; four specials
//! occupy the first ids. Case is preserved so that entity spans detokenize
//! back to their exact surface forms.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Split text into word and punctuation pieces. Whitespace separates; any
/// non-alphanumeric, non-`'`/`-` character is emitted as a single-char piece.
pub fn split_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    /// Build a vocabulary from corpus texts. Token ids are assigned in first-seen order
    /// after the specials, so the same corpus always yields the same vocabulary.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for text in corpus {
            for piece in split_pieces(text.as_ref()) {
                if !index.contains_key(&piece) {
                    index.insert(piece.clone(), tokens.len());
                    tokens.push(piece);
                }
            }
        }
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Join tokens back into text. Single space between words; no space
    /// before closing punctuation, none after an opening parenthesis.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS || id == EOS || id == PAD {
                continue;
            }
            let tok = self.token(id);
            let no_space_before = matches!(tok, ")" | "." | "," | "?" | "!" | ":" | ";");
            let after_open = out.ends_with('(');
            if !out.is_empty() && !no_space_before && !after_open {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tokens: Vec<String> =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("vocab json: {e}")))?;
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(str::to_string) {
            return Err(Error::Config("vocab missing specials".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Tokenizer { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_splits_off() {
        assert_eq!(
            split_pieces("What is (A)?"),
            vec!["What", "is", "(", "A", ")", "?"]
        );
    }

    #[test]
    fn roundtrip_preserves_entity_surface() {
        let tk = Tokenizer::build(["Sutura cranii is linked to Acrocephalosyndactyly type 5."]);
        let ids = tk.encode("Sutura cranii");
        assert_eq!(tk.decode(&ids), "Sutura cranii");
    }

    #[test]
    fn decode_attaches_parens() {
        let tk = Tokenizer::build(["(B) yes."]);
        let ids = tk.encode("(B) yes.");
        assert_eq!(tk.decode(&ids), "(B) yes.");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tk = Tokenizer::build(["hello world"]);
        let ids = tk.encode("hello mars");
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn json_roundtrip() {
        let tk = Tokenizer::build(["alpha beta (gamma)"]);
        let tk2 = Tokenizer::from_json(&tk.to_json()).unwrap();
        assert_eq!(tk.encode("beta (alpha)"), tk2.encode("beta (alpha)"));
    }
}
