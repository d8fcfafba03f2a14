//! Closed-vocabulary whitespace tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
/// Number of reserved ids preceding the first word id.
pub const N_SPECIAL: u32 = 4;

/// Word list plus reserved PAD/UNK/BOS/EOS ids. Word `i` maps to id `i + 4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token `{w}`")));
            }
            if !index.contains_key(&w) {
                index.insert(w.clone(), out.len() as u32 + N_SPECIAL);
                out.push(w);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        Ok(Self { words: out, index })
    }

    /// Builds a sorted vocabulary from every word occurring in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_lowercase)
            .collect();
        words.sort();
        words.dedup();
        Self::new(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Total id space including the reserved ids.
    pub fn size(&self) -> usize {
        self.words.len() + N_SPECIAL as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        match id {
            PAD_ID => "<pad>",
            UNK_ID => "<unk>",
            BOS_ID => "<bos>",
            EOS_ID => "<eos>",
            _ => self
                .words
                .get((id - N_SPECIAL) as usize)
                .map(String::as_str)
                .unwrap_or("<unk>"),
        }
    }

    /// `BOS + ids + EOS`, truncated to `max_len` while keeping the trailing EOS.
    pub fn tokenize(&self, description: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS_ID);
        ids.extend(
            description
                .split_whitespace()
                .take(max_len - 2)
                .map(|w| self.id(&w.to_lowercase())),
        );
        ids.push(EOS_ID);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= N_SPECIAL || id == UNK_ID)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::new(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

/// Free-function form of [`Vocabulary::tokenize`] over a raw token list.
pub fn tokenize(description: &str, vocabulary: &[String], max_len: usize) -> Result<Vec<u32>> {
    Vocabulary::new(vocabulary)?.tokenize(description, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["red", "cube", "small"]).unwrap()
    }

    #[test]
    fn empty_description_is_bos_eos() {
        assert_eq!(vocab().tokenize("", 8).unwrap(), vec![BOS_ID, EOS_ID]);
    }

    #[test]
    fn known_words_map_directly() {
        let v = vocab();
        assert_eq!(
            v.tokenize("red cube", 8).unwrap(),
            vec![BOS_ID, v.id("red"), v.id("cube"), EOS_ID]
        );
        assert_eq!(v.id("red"), 4);
        assert_eq!(v.id("cube"), 5);
    }

    #[test]
    fn lowercases_and_maps_unknown() {
        let v = vocab();
        assert_eq!(v.tokenize("RED sphere", 8).unwrap(), vec![BOS_ID, 4, UNK_ID, EOS_ID]);
    }

    #[test]
    fn truncation_keeps_eos() {
        // 100 words, max_len 16: BOS + 14 words + EOS
        let sentence = vec!["red"; 100].join(" ");
        let ids = vocab().tokenize(&sentence, 16).unwrap();
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert!(ids[1..15].iter().all(|&i| i == 4));
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(Vocabulary::new(Vec::<String>::new()), Err(Error::Config(_))));
        assert!(tokenize("a", &[], 4).is_err());
        assert!(vocab().tokenize("red", 1).is_err());
    }

    #[test]
    fn pad_is_reserved() {
        let v = vocab();
        let ids = v.tokenize("red cube small nothing", 16).unwrap();
        assert!(ids.iter().all(|&i| i != PAD_ID));
    }
}
