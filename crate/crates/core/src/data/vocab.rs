use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS_L2R: usize = 1;
pub const EOS: usize = 2;
pub const SOS_R2L: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<sor>"];
const SYMBOLS: [&str; 20] = ["a", "b", "c", "x", "y", "z", "0", "1", "2", "3", "4", "+", "-", "=", "(", ")", "^", "_", "{", "}"];

/// Bijective token string ↔ id table. Ids 0..4 are reserved control tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(SYMBOLS.iter().map(|s| s.to_string()).collect()).expect("builtin vocabulary")
    }
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(symbols).collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("token {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Ids of the non-reserved symbols.
    pub fn symbols(&self) -> impl Iterator<Item = usize> {
        RESERVED.len()..self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Vocab(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| Error::Vocab(format!("token id {id} outside vocabulary of size {}", self.len())))
    }

    /// Splits on whitespace.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }
}
