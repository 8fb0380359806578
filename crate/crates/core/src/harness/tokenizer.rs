use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    Char,
    Whitespace,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Whitespace => "whitespace",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "char" => Some(TokenizerMode::Char),
            "whitespace" => Some(TokenizerMode::Whitespace),
            _ => None,
        }
    }
}

/// Token/id bijection. Ids 0..3 are pad, unk and cls; `encode` never emits pad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary of every distinct token in `texts`, sorted.
    pub fn fit<'a>(mode: TokenizerMode, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            match mode {
                TokenizerMode::Char => set.extend(t.chars().map(String::from)),
                TokenizerMode::Whitespace => set.extend(t.split_whitespace().map(String::from)),
            }
        }
        Self::from_tokens(mode, set.into_iter().collect()).expect("fitted vocabulary is unique")
    }

    /// Rebuilds from the non-reserved tokens in id order.
    pub fn from_tokens(mode: TokenizerMode, vocab: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(vocab);
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Tokenizer { mode, tokens, ids })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    /// Includes the reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Non-reserved tokens in id order.
    pub fn vocabulary(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    fn id(&self, t: &str) -> usize {
        self.ids.get(t).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::Char => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| self.id(c.encode_utf8(&mut buf))).collect()
            }
            TokenizerMode::Whitespace => text.split_whitespace().map(|w| self.id(w)).collect(),
        }
    }

    /// Tokens as strings, one per id `encode` would produce.
    pub fn pieces(&self, text: &str) -> Vec<String> {
        match self.mode {
            TokenizerMode::Char => text.chars().map(String::from).collect(),
            TokenizerMode::Whitespace => text.split_whitespace().map(String::from).collect(),
        }
    }

    /// Pad and cls are dropped; whitespace mode joins words with one space.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks = ids.iter().filter(|&&i| i != PAD && i != CLS).map(|&i| self.token(i));
        match self.mode {
            TokenizerMode::Char => toks.collect(),
            TokenizerMode::Whitespace => toks.collect::<Vec<_>>().join(" "),
        }
    }

    pub fn vocabulary_json(&self) -> String {
        serde_json::to_string(self.vocabulary()).expect("strings serialize")
    }

    pub fn from_json(mode: TokenizerMode, json: &str) -> Result<Self> {
        let vocab: Vec<String> =
            serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("tokenizer vocabulary: {e}")))?;
        Self::from_tokens(mode, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids() {
        let t = Tokenizer::fit(TokenizerMode::Char, ["ab"]);
        assert_eq!(t.vocab_size(), 5);
        assert_eq!(t.encode("abz"), vec![3, 4, UNK]);
        assert_eq!(t.token(PAD), "<pad>");
    }

    #[test]
    fn whitespace_round_trip() {
        let t = Tokenizer::fit(TokenizerMode::Whitespace, ["the movie was good ."]);
        let ids = t.encode("the movie was good .");
        assert_eq!(t.decode(&ids), "the movie was good .");
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::fit(TokenizerMode::Char, ["hello\n\"world\""]);
        let back = Tokenizer::from_json(TokenizerMode::Char, &t.vocabulary_json()).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn char_round_trip(s in "\\PC{0,40}") {
            let t = Tokenizer::fit(TokenizerMode::Char, [s.as_str()]);
            let ids = t.encode(&s);
            prop_assert!(!ids.contains(&PAD));
            prop_assert_eq!(t.decode(&ids), s);
        }
    }
}
