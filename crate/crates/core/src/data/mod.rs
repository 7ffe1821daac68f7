//! Synthetic DNA corpora and byte-pair tokenization.

pub mod bpe;
pub mod corpus;

pub use bpe::{Vocab, SPECIALS};
pub use corpus::{CorpusSpec, Motif};

/// The base alphabet, in id order.
pub const ALPHABET: [char; 4] = ['A', 'C', 'G', 'T'];
