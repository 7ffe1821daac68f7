//! Tokenized corpora and BERT-style masking.

use crate::data::bpe::{CLS, MASK, SEP, SPECIALS};
use crate::data::Vocab;
use crate::error::Result;
use crate::rng::Rng;

/// `[CLS] ids… [SEP]`, truncated to fit `max_len`.
pub fn encode_for_model(vocab: &Vocab, seq: &str, max_len: usize) -> Result<Vec<usize>> {
    let ids = vocab.encode(seq)?;
    let keep = ids.len().min(max_len.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS);
    out.extend_from_slice(&ids[..keep]);
    out.push(SEP);
    Ok(out)
}

pub fn encode_corpus(vocab: &Vocab, corpus: &[String], max_len: usize) -> Result<Vec<Vec<usize>>> {
    corpus.iter().map(|s| encode_for_model(vocab, s, max_len)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<usize>>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Vec<Option<usize>>>,
}

impl MlmBatch {
    pub fn n_masked(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Selects each non-special position with probability `mask_rate`; selected
/// positions become `[MASK]` (80%), a random non-special token (10%) or stay
/// unchanged (10%).
pub fn mask_sequence(seq: &[usize], mask_rate: f64, vocab_size: usize, rng: &mut Rng) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = seq.to_vec();
    let mut labels = vec![None; seq.len()];
    for (j, &t) in seq.iter().enumerate() {
        if t < SPECIALS.len() || !rng.bernoulli(mask_rate) {
            continue;
        }
        labels[j] = Some(t);
        let u = rng.uniform();
        if u < 0.8 {
            input[j] = MASK;
        } else if u < 0.9 {
            input[j] = SPECIALS.len() + rng.below(vocab_size - SPECIALS.len());
        }
    }
    (input, labels)
}

/// Draws `batch_size` sequences (with replacement) and masks them.
pub fn mlm_batch(corpus: &[Vec<usize>], batch_size: usize, mask_rate: f64, vocab_size: usize, rng: &mut Rng) -> MlmBatch {
    let mut batch = MlmBatch {
        inputs: Vec::with_capacity(batch_size),
        labels: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let seq = &corpus[rng.below(corpus.len())];
        let (input, labels) = mask_sequence(seq, mask_rate, vocab_size, rng);
        batch.inputs.push(input);
        batch.labels.push(labels);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_wrap_and_truncate() {
        let v = Vocab::base();
        assert_eq!(encode_for_model(&v, "ACG", 10).unwrap(), vec![CLS, 5, 6, 7, SEP]);
        assert_eq!(encode_for_model(&v, "ACGT", 4).unwrap(), vec![CLS, 5, 6, SEP]);
    }

    #[test]
    fn masked_count_matches_binomial_mean() {
        let seq: Vec<usize> = (0..100).map(|i| 5 + i % 20).collect();
        let mut rng = Rng::new(17);
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| mask_sequence(&seq, 0.15, 30, &mut rng).1.iter().filter(|l| l.is_some()).count())
            .sum();
        let mean = total as f64 / draws as f64;
        let sigma = (100.0 * 0.15 * 0.85 / draws as f64).sqrt();
        assert!((mean - 15.0).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn replacement_split() {
        let seq: Vec<usize> = vec![7; 1000];
        let mut rng = Rng::new(2);
        let (mut masked, mut random, mut kept) = (0, 0, 0);
        for _ in 0..50 {
            let (input, labels) = mask_sequence(&seq, 0.5, 30, &mut rng);
            for (x, l) in input.iter().zip(&labels) {
                if l.is_some() {
                    match *x {
                        MASK => masked += 1,
                        7 => kept += 1,
                        _ => random += 1,
                    }
                }
            }
        }
        let n = (masked + random + kept) as f64;
        assert!((masked as f64 / n - 0.8).abs() < 0.02);
        // A random draw can land on the original token (1 in 25 here).
        assert!((random as f64 / n - 0.1 * 24.0 / 25.0).abs() < 0.015);
        assert!((kept as f64 / n - (0.1 + 0.1 / 25.0)).abs() < 0.015);
    }

    #[test]
    fn specials_never_masked_and_seeded() {
        let seq = vec![CLS, 5, 6, SEP];
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let (_, labels) = mask_sequence(&seq, 0.99, 10, &mut rng);
            assert!(labels[0].is_none() && labels[3].is_none());
        }
        let corpus = vec![vec![CLS, 5, 6, 7, SEP], vec![CLS, 8, 8, SEP]];
        let a = mlm_batch(&corpus, 4, 0.3, 10, &mut Rng::new(9));
        let b = mlm_batch(&corpus, 4, 0.3, 10, &mut Rng::new(9));
        assert_eq!(a, b);
        let none = mlm_batch(&corpus, 4, 0.0, 10, &mut Rng::new(9));
        assert_eq!(none.n_masked(), 0);
    }
}
