//! Hash tokenizer for the reference decoder.
//!
//! The reference model needs a total function from text to ids in its
//! base vocabulary, not linguistic fidelity. Words are lowercased
//! alphanumeric-or-underscore runs; each maps to `1 + fnv1a64(word) %
//! (vocab - 1)`, reserving id 0 for padding. The map is stable across
//! runs and platforms, which the dataset determinism contracts rely on.

pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone, Copy)]
pub struct HashTokenizer {
    vocab_size: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= 2, "vocab must hold pad plus one word id");
        HashTokenizer { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.word_id(&w)).collect()
    }

    /// Id a single word maps to; exposed so synthetic data generation
    /// can pick motif words with collision-free ids.
    pub fn word_id(&self, word: &str) -> u32 {
        1 + (fnv1a64(word.as_bytes()) % (self.vocab_size as u64 - 1)) as u32
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
