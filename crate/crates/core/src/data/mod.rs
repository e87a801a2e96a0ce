//! Dataset model, tokenization, vocabularies with pointer-extended ids,
//! padded batches and the synthetic corpus generator.

mod batch;
mod encode;
mod io;
pub mod synthetic;
pub mod vocab;

pub use batch::{batch, Batch, ExampleView};
pub use encode::{decode, encode_example, EncodeStats};
pub use io::{read_jsonl, split_train_test, write_jsonl};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
pub use vocab::{Vocabulary, EOS, PAD, SOS, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("record {record}: empty {field}")]
    EmptyField { record: usize, field: &'static str },
    #[error("token id {id} outside [0, {limit})")]
    IdOutOfRange { id: usize, limit: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One dataset record as stored on disk (one JSON object per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub question: String,
    pub answer: String,
    pub reviews: Vec<String>,
    /// `[key, value]` pairs.
    pub attributes: Vec<(String, String)>,
}

impl RawExample {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.question
            .split_whitespace()
            .chain(self.answer.split_whitespace())
            .chain(self.reviews.iter().flat_map(|r| r.split_whitespace()))
            .chain(
                self.attributes
                    .iter()
                    .flat_map(|(k, v)| k.split_whitespace().chain(v.split_whitespace())),
            )
    }
}

/// One encoded training instance.
///
/// Question and answer ids may be extended ids `>= vocab_size` pointing into
/// `oov`; reviews and attributes only hold in-vocabulary ids (or UNK).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAExample {
    pub question: Vec<usize>,
    pub reviews: Vec<Vec<usize>>,
    pub attributes: Vec<(usize, usize)>,
    /// Ends with exactly one EOS.
    pub answer: Vec<usize>,
    /// `oov[k]` has extended id `vocab_size + k`.
    pub oov: Vec<String>,
    pub vocab_size: usize,
}

impl QAExample {
    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    pub fn oov_id(&self, word: &str) -> Option<usize> {
        self.oov.iter().position(|w| w == word).map(|k| self.vocab_size + k)
    }

    /// Checks every stored id against the (extended) vocabulary.
    pub fn validate(&self) -> Result<(), DataError> {
        let ext = self.extended_size();
        for &id in self.question.iter().chain(&self.answer) {
            if id >= ext {
                return Err(DataError::IdOutOfRange { id, limit: ext });
            }
        }
        for &id in self
            .reviews
            .iter()
            .flatten()
            .chain(self.attributes.iter().flat_map(|(k, v)| [k, v]))
        {
            if id >= self.vocab_size {
                return Err(DataError::IdOutOfRange { id, limit: self.vocab_size });
            }
        }
        Ok(())
    }
}

/// Encodes raw records, returning the examples together with encoding counters.
pub fn encode_all(raws: &[RawExample], vocab: &Vocabulary) -> Result<(Vec<QAExample>, EncodeStats), DataError> {
    let mut stats = EncodeStats::default();
    let examples = raws
        .iter()
        .enumerate()
        .map(|(i, r)| encode_example(r, vocab, i, &mut stats))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((examples, stats))
}

/// Builds a vocabulary over every token of `raws`.
pub fn build_vocab(raws: &[RawExample], max_size: usize) -> Result<Vocabulary, DataError> {
    Vocabulary::build(raws.iter().flat_map(RawExample::tokens), max_size)
}
