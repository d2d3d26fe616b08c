use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| {
            raw.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|tok| !tok.is_empty())
        .collect()
}

/// Token/id map with training-corpus frequencies.
///
/// Regular words occupy ids `0..n_words()` in frequency-rank order (most
/// frequent first, ties broken lexicographically), so the frequency rank of
/// a word is its id plus one. The three specials follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    id_of: HashMap<String, usize>,
    freq: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized training references. Words seen
    /// fewer than `min_count` times map to `<unk>`.
    pub fn build<'a, I, S>(references: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if min_count < 1 {
            return Err(Error::invalid("min_count", "must be at least 1"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut n_refs = 0usize;
        for reference in references {
            n_refs += 1;
            for tok in reference {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        if n_refs == 0 || counts.is_empty() {
            return Err(Error::EmptyCorpus("no training tokens".into()));
        }

        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut unk_count = 0u64;
        for (tok, n) in counts {
            if n >= min_count && !is_special(&tok) {
                kept.push((tok, n));
            } else {
                unk_count += n;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = Vec::with_capacity(kept.len() + 3);
        let mut freq = Vec::with_capacity(kept.len() + 3);
        for (tok, n) in kept {
            tokens.push(tok);
            freq.push(n);
        }
        tokens.extend([UNK.to_string(), BOS.to_string(), EOS.to_string()]);
        freq.extend([unk_count, 0, 0]);

        let mut vocab = Vocabulary {
            tokens,
            id_of: HashMap::new(),
            freq,
            min_count,
        };
        vocab.reindex();
        Ok(vocab)
    }

    fn reindex(&mut self) {
        self.id_of = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Restores the lookup table after deserialization.
    pub fn from_parts(tokens: Vec<String>, freq: Vec<u64>, min_count: u64) -> Result<Self> {
        if tokens.len() != freq.len() || tokens.len() < 4 {
            return Err(Error::Format("vocabulary tokens/frequencies disagree".into()));
        }
        let n = tokens.len();
        if tokens[n - 3] != UNK || tokens[n - 2] != BOS || tokens[n - 1] != EOS {
            return Err(Error::Format("vocabulary specials missing".into()));
        }
        let mut vocab = Vocabulary {
            tokens,
            id_of: HashMap::new(),
            freq,
            min_count,
        };
        vocab.reindex();
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of regular (non-special) words.
    pub fn n_words(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn unk(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn bos(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        id >= self.n_words()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freq
    }

    /// Raw lookup; `None` for out-of-vocabulary strings.
    pub fn get(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    /// Lookup with out-of-vocabulary strings mapped to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or_else(|| self.unk())
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Maps OOV words to `<unk>` while keeping the string form.
    pub fn normalize<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        words
            .iter()
            .map(|w| match self.get(w.as_ref()) {
                Some(_) => w.as_ref().to_string(),
                None => UNK.to_string(),
            })
            .collect()
    }

    /// 1-based frequency rank of a regular word; `None` for specials.
    pub fn frequency_rank(&self, id: usize) -> Option<usize> {
        (id < self.n_words()).then_some(id + 1)
    }

    pub fn rank_of(&self, token: &str) -> Option<usize> {
        self.get(token).and_then(|id| self.frequency_rank(id))
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

fn is_special(tok: &str) -> bool {
    tok == UNK || tok == BOS || tok == EOS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    fn build(lines: &[&str], min_count: u64) -> Vocabulary {
        let r = refs(lines);
        Vocabulary::build(r.iter().map(|v| v.as_slice()), min_count).unwrap()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("A cat sits."), vec!["a", "cat", "sits"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("DOG  dog"), vec!["dog", "dog"]);
        assert_eq!(tokenize(" , ; "), Vec::<String>::new());
    }

    #[test]
    fn threshold_boundary() {
        let mut lines = vec!["cat"; 5];
        lines.extend(vec!["ocelot"; 4]);
        let v = build(&lines, 5);
        assert!(v.get("cat").is_some());
        assert!(v.get("ocelot").is_none());
        assert_eq!(v.id("ocelot"), v.unk());
        assert_eq!(v.freq(v.unk()), 4);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build(&["a b c", "c d"], 1);
        assert_eq!(v.n_words(), 4);
    }

    #[test]
    fn single_caption_hand_count() {
        let v = build(&["a a b"], 2);
        assert_eq!(v.tokens(), &["a", UNK, BOS, EOS]);
        assert_eq!(v.id("b"), v.unk());
        assert_eq!(v.freq(0), 2);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(
            Vocabulary::build(empty.iter().map(|v| v.as_slice()), 1),
            Err(Error::EmptyCorpus(_))
        ));
        let blank = vec![Vec::<String>::new()];
        assert!(Vocabulary::build(blank.iter().map(|v| v.as_slice()), 1).is_err());
        let r = refs(&["a"]);
        assert!(Vocabulary::build(r.iter().map(|v| v.as_slice()), 0).is_err());
    }

    #[test]
    fn ranks_follow_frequency_then_lexicographic() {
        let v = build(&["b b a a c", "c d"], 1);
        // a, b, c have count 2; d has 1.
        assert_eq!(v.rank_of("a"), Some(1));
        assert_eq!(v.rank_of("b"), Some(2));
        assert_eq!(v.rank_of("c"), Some(3));
        assert_eq!(v.rank_of("d"), Some(4));
        assert_eq!(v.frequency_rank(v.unk()), None);
    }

    #[test]
    fn order_insensitive_and_idempotent() {
        let a = build(&["x y z", "y z", "z"], 1);
        let b = build(&["z", "y z", "x y z"], 1);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let again = build(&["x y z", "y z", "z"], 1);
        assert_eq!(a, again);
    }

    #[test]
    fn from_parts_roundtrip() {
        let v = build(&["a b b"], 1);
        let w = Vocabulary::from_parts(v.tokens().to_vec(), v.frequencies().to_vec(), 1).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.id("b"), 0);
    }
}
