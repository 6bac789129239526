//! Vocabularies, BPE subwords, parallel corpora, batching, and synthetic
//! task generators.

mod batch;
mod bpe;
mod synthetic;
mod vocab;


pub use batch::{build_batches, Batch};
pub use bpe::{bpe_decode, bpe_encode, bpe_train, SubwordModel, WORD_END};
pub use synthetic::{cipher, gen_synthetic, synthetic_vocab, SyntheticTask};
pub use vocab::Vocabulary;

/// Reserved ids shared by every vocabulary.
pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const BOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Line-aligned pair of token-id corpora.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl ParallelCorpus {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self, DataError> {
        if src.len() != tgt.len() {
            return Err(DataError::LineCountMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        if let Some(i) = src
            .iter()
            .zip(&tgt)
            .position(|(s, t)| s.is_empty() || t.is_empty())
        {
            return Err(DataError::EmptySequence { line: i });
        }
        Ok(ParallelCorpus { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("source has {src} lines but target has {tgt}")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("empty sequence at line {line}")]
    EmptySequence { line: usize },
    #[error("sentence at line {line} exceeds the token budget ({len} > {budget})")]
    SentenceOverBudget { line: usize, len: usize, budget: usize },
    #[error("vocabulary too small: {0}")]
    VocabTooSmall(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid length range {lo}..={hi}")]
    BadLenRange { lo: usize, hi: usize },
}
