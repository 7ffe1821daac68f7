//! Character-level BPE over the ACGT alphabet.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ALPHABET;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpeOptions {
    /// Total vocabulary size, specials included.
    pub target_size: usize,
    /// Merging stops once the best pair occurs fewer times than this.
    pub min_pair_count: usize,
}

impl BpeOptions {
    pub fn new(target_size: usize) -> Self {
        Self {
            target_size,
            min_pair_count: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    /// `(left id, right id, merged id)` per merge.
    merge_ids: Vec<(usize, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Specials and the four bases only.
    pub fn base() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ALPHABET.iter().map(|c| c.to_string()))
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            merges: Vec::new(),
            tokens,
            ids,
            merge_ids: Vec::new(),
        }
    }

    /// Replays `merges` on top of the base vocabulary.
    pub fn from_merges(merges: &[(String, String)]) -> Result<Self> {
        let mut v = Self::base();
        for (l, r) in merges {
            v.push_merge(l, r)?;
        }
        Ok(v)
    }

    fn push_merge(&mut self, left: &str, right: &str) -> Result<usize> {
        let lookup = |s: &str| {
            self.ids
                .get(s)
                .copied()
                .filter(|&id| id >= SPECIALS.len())
                .ok_or_else(|| Error::CorruptManifest(format!("merge uses unknown token `{s}`")))
        };
        let (l, r) = (lookup(left)?, lookup(right)?);
        let joined = format!("{left}{right}");
        let id = match self.ids.get(&joined) {
            Some(&id) => id,
            None => {
                self.tokens.push(joined.clone());
                self.ids.insert(joined, self.tokens.len() - 1);
                self.tokens.len() - 1
            }
        };
        self.merges.push((left.to_string(), right.to_string()));
        self.merge_ids.push((l, r, id));
        Ok(id)
    }

    pub fn train(corpus: &[String], target_size: usize) -> Result<Self> {
        Self::train_with(corpus, BpeOptions::new(target_size))
    }

    /// Greedy most-frequent-pair merging; ties go to the lexicographically
    /// smallest `(left, right)` string pair.
    pub fn train_with(corpus: &[String], opts: BpeOptions) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Self::base();
        let mut seqs: Vec<Vec<usize>> = corpus
            .iter()
            .map(|s| vocab.chars_to_ids(s))
            .collect::<Result<_>>()?;

        while vocab.len() < opts.target_size {
            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for s in &seqs {
                for w in s.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
            let best = counts.iter().max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    let key = |p: &(usize, usize)| (vocab.tokens[p.0].clone(), vocab.tokens[p.1].clone());
                    key(b).cmp(&key(a))
                })
            });
            let Some((&(l, r), &count)) = best else { break };
            if count < opts.min_pair_count.max(1) {
                break;
            }
            let (left, right) = (vocab.tokens[l].clone(), vocab.tokens[r].clone());
            let id = vocab.push_merge(&left, &right)?;
            for s in &mut seqs {
                replace_pair(s, l, r, id);
            }
        }
        Ok(vocab)
    }

    fn chars_to_ids(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| match ALPHABET.iter().position(|&a| a == c) {
                Some(i) => Ok(SPECIALS.len() + i),
                None => Err(Error::InvalidCharacter(c)),
            })
            .collect()
    }

    /// Applies the merges in learned order.
    pub fn encode(&self, seq: &str) -> Result<Vec<usize>> {
        let mut ids = self.chars_to_ids(seq)?;
        for &(l, r, m) in &self.merge_ids {
            if ids.len() < 2 {
                break;
            }
            replace_pair(&mut ids, l, r, m);
        }
        Ok(ids)
    }

    /// Concatenates token strings, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.tokens.get(id).ok_or(Error::UnknownId(id))?;
            if id >= SPECIALS.len() {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            merges: self.merges.clone(),
            tokens: self.tokens.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    /// Parses a vocab file and checks that its merges regenerate its tokens.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_VERSION {
            return Err(Error::VersionUnsupported(file.version));
        }
        if file.specials != SPECIALS {
            return Err(Error::CorruptManifest("unexpected special tokens".into()));
        }
        let vocab = Self::from_merges(&file.merges)?;
        if vocab.tokens != file.tokens {
            return Err(Error::CorruptManifest("tokens do not match merge replay".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Left-to-right, non-overlapping replacement of `(l, r)` by `m`.
fn replace_pair(s: &mut Vec<usize>, l: usize, r: usize, m: usize) {
    let mut out = Vec::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
            out.push(m);
            i += 2;
        } else {
            out.push(s[i]);
            i += 1;
        }
    }
    *s = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn acac_first_merge() {
        // Four bases plus two merges, on top of the five specials.
        let v = Vocab::train(&corpus(&["ACAC"]), SPECIALS.len() + 6).unwrap();
        assert_eq!(v.merges()[0], ("A".to_string(), "C".to_string()));
        let ac = v.id("AC").unwrap();
        assert_eq!(v.encode("ACAC").unwrap(), vec![ac, ac]);
        // (AC, AC) occurs once, below the default stopping count.
        assert_eq!(v.merges().len(), 1);
    }

    #[test]
    fn aaaa_merges() {
        let opts = BpeOptions {
            target_size: 100,
            min_pair_count: 1,
        };
        let v = Vocab::train_with(&corpus(&["AAAA"]), opts).unwrap();
        let pairs: Vec<(&str, &str)> = v.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        assert_eq!(pairs, vec![("A", "A"), ("AA", "AA")]);
        assert_eq!(v.encode("AAAA").unwrap(), vec![v.id("AAAA").unwrap()]);
        let default = Vocab::train(&corpus(&["AAAA"]), 100).unwrap();
        assert_eq!(default.merges().len(), 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Vocab::train(&corpus(&["ACXG"]), 20), Err(Error::InvalidCharacter('X'))));
        assert!(matches!(Vocab::train(&[], 20), Err(Error::EmptyCorpus)));
        let v = Vocab::base();
        assert!(matches!(v.decode(&[99]), Err(Error::UnknownId(99))));
        assert_eq!(v.encode("").unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn decode_drops_specials() {
        let v = Vocab::base();
        let ids = [CLS, 5, 6, MASK, 8, SEP, PAD];
        assert_eq!(v.decode(&ids).unwrap(), "ACT");
    }

    #[test]
    fn json_round_trip_and_replay() {
        let c = corpus(&["ACGTACGTTTGACA", "GGGACGTAC", "TTTTACG"]);
        let v = Vocab::train(&c, 20).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(Vocab::from_merges(v.merges()).unwrap(), v);
        assert_eq!(Vocab::train(&c, 20).unwrap().merges(), v.merges());
    }

    proptest! {
        #[test]
        fn tokenization_partitions_input(
            lines in prop::collection::vec("[ACGT]{0,40}", 1..6),
            probe in "[ACGT]{0,60}",
            target in 9usize..40,
        ) {
            let c: Vec<String> = lines.iter().map(|s| format!("{s}ACGT")).collect();
            let v = Vocab::train(&c, target).unwrap();
            prop_assert!(v.len() <= target.max(9));
            let ids = v.encode(&probe).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), probe.clone());
            let joined: String = ids.iter().map(|&i| v.token(i).unwrap()).collect();
            prop_assert_eq!(joined, probe);
        }
    }
}
