use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{io_err, usage, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Surface form of a language token, e.g. `__de__`.
pub fn language_token(lang: &str) -> String {
    format!("__{lang}__")
}

fn is_language_token(tok: &str) -> bool {
    tok.len() > 4
        && tok.starts_with("__")
        && tok.ends_with("__")
        && tok[2..tok.len() - 2].bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}

fn check_language_code(lang: &str) -> Result<()> {
    if lang.is_empty() || !lang.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()) {
        return usage(format!("invalid language code {lang:?}"));
    }
    Ok(())
}

/// Token/id bijection with fixed special ids and one token per language.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
}

impl Vocabulary {
    /// Specials, then `__xx__` for each language, then content tokens in order.
    /// Duplicate content tokens are kept once.
    pub fn new<S: AsRef<str>>(languages: &[S], content: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut langs = Vec::new();
        for lang in languages {
            let lang = lang.as_ref();
            check_language_code(lang)?;
            if langs.iter().any(|l| l == lang) {
                return usage(format!("language {lang} listed twice"));
            }
            langs.push(lang.to_string());
            tokens.push(language_token(lang));
        }
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for tok in content {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return usage(format!("invalid vocabulary token {tok:?}"));
            }
            if is_language_token(&tok) || SPECIALS.contains(&tok.as_str()) {
                return usage(format!("content token {tok:?} collides with a reserved token"));
            }
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len());
                tokens.push(tok);
            }
        }
        Ok(Self { tokens, index, languages: langs })
    }

    /// Parses the one-token-per-line format.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let lines: Vec<&str> = lines.iter().map(|l| l.as_ref()).collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return usage(format!("vocabulary must start with {}", SPECIALS.join(" ")));
        }
        let rest = &lines[SPECIALS.len()..];
        let n_lang = rest.iter().take_while(|t| is_language_token(t)).count();
        let languages: Vec<&str> = rest[..n_lang].iter().map(|t| &t[2..t.len() - 2]).collect();
        let content: Vec<String> = rest[n_lang..].iter().map(|t| t.to_string()).collect();
        let vocab = Self::new(&languages, content.iter().cloned())?;
        if vocab.len() != lines.len() {
            return usage("vocabulary contains duplicate tokens");
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let lines: Vec<&str> = text.lines().collect();
        Self::from_lines(&lines).map_err(|e| match e {
            Error::Usage(message) => Error::Parse { path: path.to_path_buf(), line: 0, message },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
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

    /// Id of `token`, or unk.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_id(&self, lang: &str) -> Result<usize> {
        match self.languages.iter().position(|l| l == lang) {
            Some(k) => Ok(SPECIALS.len() + k),
            None => usage(format!("language {lang} is not in the vocabulary")),
        }
    }

    /// True for specials and language tokens.
    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.first_content_id()
    }

    pub fn first_content_id(&self) -> usize {
        SPECIALS.len() + self.languages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_specials_languages_content() {
        let v = Vocabulary::new(&["en", "de"], ["a".to_string(), "b".to_string(), "a".to_string()]).unwrap();
        assert_eq!(v.tokens()[..7], ["<pad>", "<s>", "</s>", "<unk>", "<mask>", "__en__", "__de__"]);
        assert_eq!(v.len(), 9);
        assert_eq!(v.lang_id("de").unwrap(), 6);
        assert_eq!(v.id("<mask>"), Some(MASK));
        assert!(v.is_reserved(6) && !v.is_reserved(7));
        assert_eq!(Vocabulary::from_lines(v.tokens()).unwrap(), v);
    }

    #[test]
    fn collisions_are_rejected() {
        assert!(Vocabulary::new(&["en"], ["__fr__".to_string()]).is_err());
        assert!(Vocabulary::new(&["en"], ["<s>".to_string()]).is_err());
        assert!(Vocabulary::new(&["EN"], Vec::new()).is_err());
        assert!(Vocabulary::from_lines(&["<s>", "<pad>"]).is_err());
    }
}
