use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const NUM_SPECIAL: usize = 3;

/// k-mer vocabulary: three special tokens followed by every k-mer over the
/// alphabet in lexicographic (base-|alphabet|) order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    k: usize,
    alphabet: Vec<char>,
}

impl Vocabulary {
    pub fn new(k: usize, alphabet: Vec<char>) -> Result<Self> {
        if k == 0 {
            bail!(Config, "k must be at least 1");
        }
        if alphabet.len() < 2 {
            bail!(Config, "alphabet needs at least two symbols");
        }
        let mut sorted = alphabet.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != alphabet.len() {
            bail!(Config, "alphabet symbols must be distinct");
        }
        if alphabet.iter().any(|c| !c.is_ascii_uppercase()) {
            bail!(Config, "alphabet symbols must be uppercase ASCII letters");
        }
        Ok(Vocabulary { k, alphabet })
    }

    /// `ACGT` alphabet.
    pub fn nucleotide(k: usize) -> Result<Self> {
        Self::new(k, vec!['A', 'C', 'G', 'T'])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn num_kmers(&self) -> usize {
        self.alphabet.len().pow(self.k as u32)
    }

    pub fn size(&self) -> usize {
        self.num_kmers() + NUM_SPECIAL
    }

    fn symbol_index(&self, c: u8) -> Option<usize> {
        self.alphabet.iter().position(|a| *a as u32 == c as u32)
    }

    /// Id of one k-mer; any non-alphabet symbol maps the whole k-mer to UNK.
    pub fn id_of(&self, kmer: &[u8]) -> usize {
        debug_assert_eq!(kmer.len(), self.k);
        let base = self.alphabet.len();
        let mut id = 0;
        for c in kmer {
            match self.symbol_index(*c) {
                Some(i) => id = id * base + i,
                None => return UNK,
            }
        }
        NUM_SPECIAL + id
    }

    pub fn kmer_of(&self, id: usize) -> Option<String> {
        if id < NUM_SPECIAL || id >= self.size() {
            return None;
        }
        let base = self.alphabet.len();
        let mut rest = id - NUM_SPECIAL;
        let mut out = vec![' '; self.k];
        for slot in out.iter_mut().rev() {
            *slot = self.alphabet[rest % base];
            rest /= base;
        }
        Some(out.into_iter().collect())
    }

    /// Display form of any id, including specials.
    pub fn token_text(&self, id: usize) -> String {
        match id {
            PAD => "[PAD]".into(),
            UNK => "[UNK]".into(),
            CLS => "[CLS]".into(),
            _ => self.kmer_of(id).unwrap_or_else(|| "[?]".into()),
        }
    }

    /// Non-overlapping k-mers of `seq`; a trailing partial k-mer is dropped.
    pub fn tokenize(&self, seq: &str) -> TokenSequence {
        let ids: Vec<usize> = seq
            .as_bytes()
            .chunks_exact(self.k)
            .map(|kmer| self.id_of(kmer))
            .collect();
        TokenSequence::new(ids)
    }

    /// Concatenated k-mers of the valid tokens.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.valid_ids().iter().map(|id| self.token_text(*id)).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for c in &self.alphabet {
            h.update((*c as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Token ids; positions at or beyond `valid_len` are padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let valid_len = ids.len();
        TokenSequence { ids, valid_len }
    }

    pub fn padded(ids: Vec<usize>, valid_len: usize) -> Result<Self> {
        if valid_len > ids.len() {
            bail!(Data, "valid_len {} exceeds length {}", valid_len, ids.len());
        }
        if ids[valid_len..].iter().any(|id| *id != PAD) {
            bail!(Data, "non-PAD id beyond valid_len");
        }
        Ok(TokenSequence { ids, valid_len })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.valid_len]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    /// Standalone sequence of valid tokens `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence::new(self.ids[start..end].to_vec())
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some(id) = self.ids.iter().find(|id| **id >= vocab_size) {
            bail!(Data, "token id {} outside vocabulary of size {}", id, vocab_size);
        }
        Ok(())
    }
}
