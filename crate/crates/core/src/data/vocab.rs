//! Word-level vocabulary and fixed-length tokenization.

use std::collections::{BTreeSet, HashMap};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Special tokens first, then every distinct whitespace-separated word of
    /// the corpus in lexicographic order.
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = captions
            .into_iter()
            .flat_map(|c| c.split_whitespace())
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        Self::from_words(distinct.into_iter())
    }

    /// Special tokens followed by `words` in the given order (duplicates skipped).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in SPECIALS.iter().copied().chain(words) {
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_string(), v.words.len());
                v.words.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `[BOS, word ids…, EOS, PAD…]` of exactly `context_length` ids. Captions
    /// that do not fit are cut before EOS.
    pub fn tokenize(&self, caption: &str, context_length: usize) -> Vec<usize> {
        assert!(context_length >= 2, "context must hold BOS and EOS");
        let words: Vec<&str> = caption.split_whitespace().collect();
        let room = context_length - 2;
        if words.len() > room {
            log::debug!(
                "caption truncated from {} to {} words: {:?}",
                words.len(),
                room,
                caption
            );
        }
        let mut ids = Vec::with_capacity(context_length);
        ids.push(BOS_ID);
        ids.extend(words.iter().take(room).map(|w| self.id(w)));
        ids.push(EOS_ID);
        ids.resize(context_length, PAD_ID);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction() {
        let v = Vocabulary::from_words(["red", "square"]);
        assert_eq!(v.id("red"), 4);
        assert_eq!(v.id("square"), 5);
        assert_eq!(v.tokenize("red square", 6), vec![1, 4, 5, 2, 0, 0]);
        assert_eq!(v.tokenize("", 5), vec![1, 2, 0, 0, 0]);
        assert_eq!(v.tokenize("red hexagon", 5), vec![1, 4, UNK_ID, 2, 0]);
    }

    #[test]
    fn truncates_before_eos() {
        let v = Vocabulary::from_words(["a", "b"]);
        assert_eq!(v.tokenize("a b a b", 4), vec![1, 4, 5, 2]);
    }

    #[test]
    fn corpus_order_is_sorted_and_dense() {
        let v = Vocabulary::from_corpus(["b a", "c a"]);
        assert_eq!(v.words(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c"]);
        let w = Vocabulary::from_corpus(["c a", "b a"]);
        assert_eq!(v, w);
    }
}
