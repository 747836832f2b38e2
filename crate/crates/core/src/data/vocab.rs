use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::DataError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

/// Token ↔ id map. Ids `0..5` are reserved for the special roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary from ordinary tokens, deduplicating in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            vocab.push(r.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// One ordinary token per line; line `i` (0-based) has id `5 + i`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_fixed() {
        let v = Vocab::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(CLS), "<cls>");
        assert_eq!(v.id("<mask>"), MASK);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("a"), 5);
        let mut ids = vec![PAD, UNK, CLS, SEP, MASK];
        ids.dedup();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::from_tokens(["uncer", "##tain", "ty"]);
        let back = Vocab::from_text(&v.to_text());
        assert_eq!(v, back);
        for t in v.tokens() {
            assert_eq!(back.token(back.id(t)), t);
        }
    }
}
