//! Seeded synthetic DNA with planted motifs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ALPHABET;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MIN_SEQUENCE_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub pattern: String,
    /// Probability that a sequence receives one copy.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub motifs: Vec<Motif>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_sequences: 2000,
            min_len: 48,
            max_len: 120,
            motifs: [("TATAAA", 0.5), ("CACGTG", 0.4), ("GGGCGG", 0.3), ("CCAAT", 0.3)]
                .iter()
                .map(|&(p, r)| Motif {
                    pattern: p.into(),
                    rate: r,
                })
                .collect(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 {
            return Err(Error::InvalidConfig("num_sequences must be positive".into()));
        }
        if self.min_len < MIN_SEQUENCE_LEN || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "length range [{}, {}] must satisfy {MIN_SEQUENCE_LEN} <= min <= max",
                self.min_len, self.max_len
            )));
        }
        for m in &self.motifs {
            if let Some(c) = m.pattern.chars().find(|c| !ALPHABET.contains(c)) {
                return Err(Error::InvalidCharacter(c));
            }
            if m.pattern.is_empty() || m.pattern.len() > self.min_len {
                return Err(Error::InvalidConfig(format!(
                    "motif `{}` must be non-empty and fit in {} bases",
                    m.pattern, self.min_len
                )));
            }
            if !(0.0..=1.0).contains(&m.rate) {
                return Err(Error::InvalidConfig(format!("motif rate {} outside [0, 1]", m.rate)));
            }
        }
        Ok(())
    }
}

fn random_bases(rng: &mut Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| ALPHABET[rng.below(4)] as u8).collect()
}

/// Writes `pattern` at a random offset not overlapping `taken`; gives up
/// after a bounded number of attempts.
fn plant(seq: &mut [u8], pattern: &str, taken: &mut Vec<(usize, usize)>, rng: &mut Rng) -> bool {
    let m = pattern.len();
    for _ in 0..32 {
        let pos = rng.below(seq.len() - m + 1);
        if taken.iter().all(|&(a, b)| pos + m <= a || pos >= b) {
            seq[pos..pos + m].copy_from_slice(pattern.as_bytes());
            taken.push((pos, pos + m));
            return true;
        }
    }
    false
}

/// One sequence per entry; the same spec always gives the same corpus.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.num_sequences);
    for _ in 0..spec.num_sequences {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let mut seq = random_bases(&mut rng, len);
        let mut taken = Vec::new();
        for m in &spec.motifs {
            if m.rate > 0.0 && rng.bernoulli(m.rate) {
                plant(&mut seq, &m.pattern, &mut taken, &mut rng);
            }
        }
        out.push(String::from_utf8(seq).expect("ascii bases"));
    }
    Ok(out)
}

/// Binary task: label 1 sequences carry `motif`, label 0 sequences are
/// random background guaranteed not to contain it. Classes alternate.
pub fn gen_motif_task(motif: &str, n: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<(u8, String)>> {
    let spec = CorpusSpec {
        num_sequences: n.max(1),
        min_len,
        max_len,
        motifs: vec![Motif {
            pattern: motif.into(),
            rate: 1.0,
        }],
        seed,
    };
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let len = min_len + rng.below(max_len - min_len + 1);
        let seq = loop {
            let mut seq = random_bases(&mut rng, len);
            if label == 1 {
                plant(&mut seq, motif, &mut Vec::new(), &mut rng);
            }
            let s = String::from_utf8(seq).expect("ascii bases");
            if label == 1 || !s.contains(motif) {
                break s;
            }
        };
        out.push((label, seq));
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, seqs: &[String]) -> Result<()> {
    let mut text = seqs.join("\n");
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Reads one sequence per line, skipping blank lines.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Reads `label<TAB>sequence` lines.
pub fn read_task(path: impl AsRef<Path>) -> Result<Vec<(u8, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::InvalidConfig(format!("{}:{}: expected `label<TAB>sequence`", path.display(), n + 1));
        let (label, seq) = line.split_once('\t').ok_or_else(bad)?;
        let label: u8 = label.trim().parse().map_err(|_| bad())?;
        if label > 1 {
            return Err(bad());
        }
        out.push((label, seq.trim().to_string()));
    }
    Ok(out)
}

pub fn write_task(path: impl AsRef<Path>, rows: &[(u8, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(l, s)| format!("{l}\t{s}\n")).collect();
    write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motifs: Vec<Motif>) -> CorpusSpec {
        CorpusSpec {
            num_sequences: 200,
            min_len: 20,
            max_len: 40,
            motifs,
            seed: 5,
        }
    }

    #[test]
    fn reproducible() {
        let s = CorpusSpec::default();
        assert_eq!(gen_corpus(&s).unwrap(), gen_corpus(&s).unwrap());
        let other = CorpusSpec { seed: 6, ..s.clone() };
        assert_ne!(gen_corpus(&s).unwrap(), gen_corpus(&other).unwrap());
    }

    #[test]
    fn certain_motif_always_present() {
        let c = gen_corpus(&spec(vec![Motif {
            pattern: "TATA".into(),
            rate: 1.0,
        }]))
        .unwrap();
        assert!(c.iter().all(|s| s.contains("TATA")));
        assert!(c.iter().all(|s| (20..=40).contains(&s.len())));
    }

    #[test]
    fn no_motif_gives_uniform_bases() {
        let c = gen_corpus(&CorpusSpec {
            num_sequences: 500,
            ..spec(vec![])
        })
        .unwrap();
        let total: usize = c.iter().map(String::len).sum();
        for b in ALPHABET {
            let n = c.iter().flat_map(|s| s.chars()).filter(|&x| x == b).count() as f64;
            let p = n / total as f64;
            // 3σ for a binomial proportion around 1/4.
            assert!((p - 0.25).abs() < 3.0 * (0.1875 / total as f64).sqrt(), "{b}: {p}");
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(vec![]);
        s.min_len = 5;
        assert!(gen_corpus(&s).is_err());
        let s = spec(vec![Motif {
            pattern: "TAXA".into(),
            rate: 1.0,
        }]);
        assert!(matches!(gen_corpus(&s), Err(Error::InvalidCharacter('X'))));
    }

    #[test]
    fn motif_task_is_labelled_by_presence() {
        let rows = gen_motif_task("CACGTG", 100, 30, 50, 3).unwrap();
        for (label, s) in &rows {
            assert_eq!(*label == 1, s.contains("CACGTG"));
        }
        assert_eq!(rows.iter().filter(|r| r.0 == 1).count(), 50);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&spec(vec![])).unwrap();
        write_corpus(dir.path().join("c.txt"), &c).unwrap();
        assert_eq!(read_corpus(dir.path().join("c.txt")).unwrap(), c);
        let t = gen_motif_task("TATA", 10, 20, 30, 1).unwrap();
        write_task(dir.path().join("t.tsv"), &t).unwrap();
        assert_eq!(read_task(dir.path().join("t.tsv")).unwrap(), t);
    }
}
