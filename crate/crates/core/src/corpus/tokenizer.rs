//! Word-level tokenizer with single-character fallback over a closed
//! alphabet.
//!
//! Text is split into pieces: an optional single leading space followed by
//! a letter run, a digit chunk of at most three digits, or one other
//! symbol. Pieces seen while building the vocabulary become tokens; any
//! other piece is spelled out character by character. Concatenating the
//! pieces reproduces the input exactly.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::EOS_TOKEN;

/// Every character the generator can emit.
pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 .,?'-@:;!";

pub const EOS_TEXT: &str = "<eos>";

const MAX_DIGIT_CHUNK: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Other,
}

fn class(c: char) -> Class {
    if c.is_ascii_alphabetic() {
        Class::Letter
    } else if c.is_ascii_digit() {
        Class::Digit
    } else {
        Class::Other
    }
}

/// Splits text into tokenizer pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        let c = text[i..].chars().next().expect("in bounds");
        let mut body = i;
        if c == ' ' {
            match text[i + 1..].chars().next() {
                Some(n) if n != ' ' => body = i + 1,
                _ => {
                    out.push(&text[i..i + 1]);
                    i += 1;
                    continue;
                }
            }
        }
        let head = text[body..].chars().next().expect("in bounds");
        let mut end = body + head.len_utf8();
        match class(head) {
            Class::Letter => {
                while end < text.len() && bytes[end].is_ascii_alphabetic() {
                    end += 1;
                }
            }
            Class::Digit => {
                while end < text.len() && bytes[end].is_ascii_digit() && end - body < MAX_DIGIT_CHUNK {
                    end += 1;
                }
            }
            Class::Other => {}
        }
        out.push(&text[start..end]);
        i = end;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary: end-of-sequence, the alphabet's characters, then
    /// every multi-character piece found in `texts`, sorted.
    pub fn build<'a, I>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = BTreeSet::new();
        for text in texts {
            check_alphabet(text)?;
            for p in pieces(text) {
                if p.chars().count() > 1 {
                    words.insert(p.to_string());
                }
            }
        }
        let mut tokens = vec![EOS_TEXT.to_string()];
        let mut chars: Vec<char> = ALPHABET.chars().collect();
        chars.sort_unstable();
        tokens.extend(chars.into_iter().map(String::from));
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS_TEXT) {
            return Err(Error::Tokenize(format!("token 0 must be {EOS_TEXT}")));
        }
        debug_assert_eq!(EOS_TOKEN, 0);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Tokenize(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Tokenize(format!("duplicate token {t:?}")));
            }
        }
        for c in ALPHABET.chars() {
            if !index.contains_key(c.encode_utf8(&mut [0; 4]) as &str) {
                return Err(Error::Tokenize(format!("vocabulary lacks fallback character {c:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary file body: one token per line, id = line number.
    pub fn to_vocab_file(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_vocab_file(body: &str) -> Result<Self> {
        let body = body.strip_suffix('\n').unwrap_or(body);
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        check_alphabet(text)?;
        let mut ids = Vec::new();
        for p in pieces(text) {
            match self.index.get(p) {
                Some(&id) => ids.push(id),
                None => {
                    for c in p.chars() {
                        ids.push(self.index[c.encode_utf8(&mut [0; 4]) as &str]);
                    }
                }
            }
        }
        Ok(ids)
    }

    /// Inverse of [`Self::tokenize`]; the end-of-sequence token renders as
    /// nothing.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            if id == EOS_TOKEN {
                continue;
            }
            let t = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Tokenize(format!("token id {id} outside vocabulary")))?;
            s.push_str(t);
        }
        Ok(s)
    }
}

fn check_alphabet(text: &str) -> Result<()> {
    match text.chars().find(|c| !ALPHABET.contains(*c)) {
        Some(c) => Err(Error::Tokenize(format!("symbol {c:?} is outside the alphabet"))),
        None => Ok(()),
    }
}
