use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, EOS, PAD, BOS};

/// Marks a piece that continues the previous word in char mode.
pub const CONTINUATION: char = '+';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Whitespace,
    /// One piece per character; non-initial pieces carry the `+` prefix.
    Char,
}

/// Token ids with the index of the word each piece belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub word_of: Vec<usize>,
}

impl Tokenized {
    pub fn word_count(&self) -> usize {
        self.word_of.last().map_or(0, |w| w + 1)
    }
}

fn is_continuation(piece: &str) -> bool {
    piece.starts_with(CONTINUATION) && piece.chars().count() > 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
}

impl Tokenizer {
    pub fn new(mode: TokenizerMode) -> Self {
        Self { mode }
    }

    /// Surface pieces and their word indices.
    pub fn pieces(&self, text: &str) -> (Vec<String>, Vec<usize>) {
        let mut pieces = Vec::new();
        let mut word_of = Vec::new();
        for (w, word) in text.split_whitespace().enumerate() {
            match self.mode {
                TokenizerMode::Whitespace => {
                    pieces.push(word.to_string());
                    word_of.push(w);
                }
                TokenizerMode::Char => {
                    for (k, c) in word.chars().enumerate() {
                        pieces.push(if k == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") });
                        word_of.push(w);
                    }
                }
            }
        }
        (pieces, word_of)
    }

    pub fn tokenize(&self, text: &str, vocab: &Vocabulary) -> Tokenized {
        let (pieces, word_of) = self.pieces(text);
        Tokenized { ids: pieces.iter().map(|p| vocab.id_or_unk(p)).collect(), word_of }
    }

    /// Inverse of [`Tokenizer::tokenize`]; pad, bos, eos and language tokens are skipped.
    pub fn detokenize(&self, ids: &[usize], vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) || (vocab.is_reserved(id) && id > super::vocab::MASK) {
                continue;
            }
            let piece = vocab.token(id).unwrap_or("<unk>");
            if self.mode == TokenizerMode::Char && is_continuation(piece) && !out.is_empty() {
                out.push_str(&piece[CONTINUATION.len_utf8()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        out
    }

    /// Word index per piece recovered from surface pieces alone.
    pub fn word_boundaries(&self, ids: &[usize], vocab: &Vocabulary) -> Vec<usize> {
        let mut out = Vec::with_capacity(ids.len());
        let mut word = 0;
        for (k, &id) in ids.iter().enumerate() {
            let cont = self.mode == TokenizerMode::Char && vocab.token(id).is_some_and(is_continuation);
            if k > 0 && !cont {
                word += 1;
            }
            out.push(word);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_mode_marks_continuations() {
        let t = Tokenizer::new(TokenizerMode::Char);
        let (pieces, words) = t.pieces("abc d");
        assert_eq!(pieces, ["a", "+b", "+c", "d"]);
        assert_eq!(words, [0, 0, 0, 1]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::new(&["en"], ["x".to_string()]).unwrap();
        let t = Tokenizer::default().tokenize("x y", &v);
        assert_eq!(t.ids, [6, super::super::vocab::UNK]);
        assert_eq!(Tokenizer::default().detokenize(&[5, 6, EOS], &v), "x");
    }
}
