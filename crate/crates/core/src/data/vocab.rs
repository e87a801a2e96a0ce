use super::DataError;
use std::collections::{BTreeMap, HashMap};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Word ↔ id map. Ids `0..4` are reserved for PAD, UNK, SOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent words (ties broken
    /// lexicographically) and places them after the reserved ids.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self, DataError> {
        if max_size < RESERVED.len() {
            return Err(DataError::Config(format!(
                "vocabulary size {max_size} is smaller than the {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(DataError::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string())))
    }

    /// Rebuilds a vocabulary from its non-reserved words in id order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build("a a b".split_whitespace(), 5).unwrap();
        assert_eq!(v.lookup("a"), 4);
        assert_eq!(v.lookup("b"), 5);
        assert_eq!(v.lookup("zzz"), UNK);
        assert_eq!(v.word(EOS), Some("</s>"));
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = Vocabulary::build("y y x x".split_whitespace(), 10).unwrap();
        assert_eq!(v.lookup("x"), 4);
        assert_eq!(v.lookup("y"), 5);
    }

    #[test]
    fn truncates_to_most_frequent() {
        let v = Vocabulary::build("c b b a a a d d d d e e e e e f".split_whitespace(), 4).unwrap();
        assert_eq!(v.words(), &["e", "d", "a", "b"].map(String::from));
        assert_eq!(v.lookup("c"), UNK);
            }

    #[test]
    fn too_small_is_config_error() {
        assert!(matches!(Vocabulary::build(["a"], 3), Err(DataError::Config(_))));
        assert!(matches!(Vocabulary::build([], 10), Err(DataError::Config(_))));
    }

    #[test]
    fn bijective_on_words() {
        let v = Vocabulary::build("q w e r t y q w".split_whitespace(), 100).unwrap();
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.lookup(w), i + 4);
            assert_eq!(v.word(i + 4), Some(w.as_str()));
        }
    }
}
