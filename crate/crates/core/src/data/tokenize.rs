use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, SEP};

/// How words are split into model tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitMode {
    /// One token per word.
    Word,
    /// Words longer than `piece_len` characters are cut into `ceil(len / piece_len)` pieces;
    /// continuation pieces carry a `##` prefix.
    Subword { piece_len: usize },
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Subword { piece_len: 4 }
    }
}

pub const CONTINUATION: &str = "##";

impl SplitMode {
    pub fn pieces(self, word: &str) -> Vec<String> {
        match self {
            SplitMode::Word => vec![word.to_string()],
            SplitMode::Subword { piece_len } => {
                let chars: Vec<char> = word.chars().collect();
                if chars.is_empty() {
                    return vec![String::new()];
                }
                chars
                    .chunks(piece_len.max(1))
                    .enumerate()
                    .map(|(i, c)| {
                        let s: String = c.iter().collect();
                        if i == 0 {
                            s
                        } else {
                            format!("{CONTINUATION}{s}")
                        }
                    })
                    .collect()
            }
        }
    }
}

/// A sentence mapped to model tokens: `[CLS] t1 .. tn [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenized {
    pub token_ids: Vec<usize>,
    /// Word index for each real token (positions `1..=alignment.len()`).
    pub alignment: Vec<usize>,
    pub n_words: usize,
    pub truncated: bool,
}

impl Tokenized {
    pub fn n_real(&self) -> usize {
        self.alignment.len()
    }

    /// Number of leading words that kept at least one token.
    pub fn words_covered(&self) -> usize {
        self.alignment.last().map_or(0, |w| w + 1)
    }
}

/// Maps words to ids, prepending CLS and appending SEP. At most `max_len`
/// tokens are produced; anything cut sets `truncated`.
pub fn tokenize(words: &[String], vocab: &Vocab, mode: SplitMode, max_len: usize) -> Tokenized {
    let budget = max_len.saturating_sub(2).max(1);
    let mut token_ids = vec![CLS];
    let mut alignment = Vec::new();
    let mut truncated = false;
    'words: for (w, word) in words.iter().enumerate() {
        for piece in mode.pieces(word) {
            if alignment.len() == budget {
                truncated = true;
                break 'words;
            }
            token_ids.push(vocab.id(&piece));
            alignment.push(w);
        }
    }
    token_ids.push(SEP);
    Tokenized {
        token_ids,
        alignment,
        n_words: words.len(),
        truncated,
    }
}

/// Reassembles words from real token ids and their alignment.
pub fn detokenize(tok: &Tokenized, vocab: &Vocab) -> Vec<String> {
    let mut words: Vec<String> = vec![String::new(); tok.words_covered()];
    for (i, &w) in tok.alignment.iter().enumerate() {
        let piece = vocab.token(tok.token_ids[i + 1]);
        words[w].push_str(piece.strip_prefix(CONTINUATION).unwrap_or(piece));
    }
    words
}
