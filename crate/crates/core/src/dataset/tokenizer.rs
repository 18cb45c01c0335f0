//! Word-level tokenizer over a fixed vocabulary file (one token per line,
//! line number = id, lines 0..3 reserved for `[PAD]`, `[CLS]`, `[UNK]`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];
pub const CLS_POSITION: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with the reserved tokens followed by `words`
    /// (duplicates dropped, first occurrence wins).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err(Error::Config(format!(
                "vocabulary lines 0..3 must be {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids with a padding mask; position 0 is always `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() != self.mask.len() {
            return Err(Error::Shape("token ids and mask must be equal, non-zero length".into()));
        }
        if !self.mask[CLS_POSITION] {
            return Err(Error::Precondition("CLS position is masked out".into()));
        }
        for (&id, &m) in self.ids.iter().zip(&self.mask) {
            if id >= vocab_size {
                return Err(Error::Vocab { id, size: vocab_size });
            }
            if !m && id != PAD_ID {
                return Err(Error::Precondition(format!("masked position carries id {id}")));
            }
        }
        Ok(())
    }
}

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `[CLS] w1 w2 ... [PAD]...`, exactly `max_len` ids, truncated at the tail.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if vocab.is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("token length must be at least 1".into()));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    for w in words(text).into_iter().take(max_len - 1) {
        ids.push(vocab.id(&w).unwrap_or(UNK_ID));
    }
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(TokenSequence { ids, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_words(["no", "findings", "bright", "sphere"])
    }

    #[test]
    fn empty_text_is_cls_then_pad() {
        let t = tokenize("", &vocab(), 5).unwrap();
        assert_eq!(t.ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(t.mask, vec![true, false, false, false, false]);
    }

    #[test]
    fn known_words_map_directly() {
        let v = vocab();
        let t = tokenize("No findings.", &v, 6).unwrap();
        assert_eq!(
            t.ids,
            vec![CLS_ID, v.id("no").unwrap(), v.id("findings").unwrap(), PAD_ID, PAD_ID, PAD_ID]
        );
        assert_eq!(t.real_tokens(), 3);
        t.validate(v.len()).unwrap();
    }

    #[test]
    fn unknown_words_become_unk_and_long_text_truncates() {
        let v = vocab();
        let t = tokenize("bright, mysterious sphere; sphere sphere", &v, 4).unwrap();
        assert_eq!(t.ids.len(), 4);
        assert_eq!(t.ids, vec![CLS_ID, v.id("bright").unwrap(), UNK_ID, v.id("sphere").unwrap()]);
        assert!(t.mask.iter().all(|&m| m));
    }

    #[test]
    fn vocabulary_must_start_with_reserved_tokens() {
        assert!(matches!(Vocab::from_tokens(vec![]), Err(Error::Config(_))));
        assert!(Vocab::from_tokens(vec!["a".into(), "b".into(), "c".into()]).is_err());
        let dup = vec!["[PAD]", "[CLS]", "[UNK]", "x", "x"]
            .into_iter()
            .map(String::from)
            .collect();
        assert!(Vocab::from_tokens(dup).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[CLS]\n[UNK]\n"));
    }
}
