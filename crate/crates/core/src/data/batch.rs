use super::{ParallelCorpus, BOS, EOS, PAD};
use crate::tensor::Rng;

/// One padded training batch, row-major.
///
/// Source rows end with EOS; target input is BOS-shifted and target output
/// EOS-terminated, so `tgt_input` and `tgt_output` are the same sequence
/// offset by one and share a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub src_cols: usize,
    pub tgt_cols: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_input: Vec<usize>,
    pub tgt_output: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    /// Corpus line numbers in row order.
    pub lines: Vec<usize>,
}

impl Batch {
    fn from_lines(corpus: &ParallelCorpus, lines: Vec<usize>) -> Batch {
        let src_cols = lines.iter().map(|&i| corpus.src[i].len() + 1).max().unwrap_or(0);
        let tgt_cols = lines.iter().map(|&i| corpus.tgt[i].len() + 1).max().unwrap_or(0);
        let rows = lines.len();
        let mut b = Batch {
            rows,
            src_cols,
            tgt_cols,
            src: Vec::with_capacity(rows * src_cols),
            src_mask: Vec::with_capacity(rows * src_cols),
            tgt_input: Vec::with_capacity(rows * tgt_cols),
            tgt_output: Vec::with_capacity(rows * tgt_cols),
            tgt_mask: Vec::with_capacity(rows * tgt_cols),
            lines,
        };
        for &i in &b.lines {
            let s = &corpus.src[i];
            b.src.extend_from_slice(s);
            b.src.push(EOS);
            b.src.resize(b.src.len() + src_cols - s.len() - 1, PAD);

            let t = &corpus.tgt[i];
            b.tgt_input.push(BOS);
            b.tgt_input.extend_from_slice(t);
            b.tgt_input.resize(b.tgt_input.len() + tgt_cols - t.len() - 1, PAD);
            b.tgt_output.extend_from_slice(t);
            b.tgt_output.push(EOS);
            b.tgt_output.resize(b.tgt_output.len() + tgt_cols - t.len() - 1, PAD);
        }
        b.src_mask = b.src.iter().map(|&t| t != PAD).collect();
        b.tgt_mask = b.tgt_output.iter().map(|&t| t != PAD).collect();
        b
    }

    /// Padded token count charged against the budget.
    pub fn padded_tokens(&self) -> usize {
        self.rows * (self.src_cols + self.tgt_cols)
    }

    /// Non-PAD target output positions (loss denominator basis).
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Bucket sentences by length, pack greedily under `token_budget` padded
/// tokens per batch, and shuffle deterministically by `seed`. Sentences
/// that alone exceed the budget are skipped; the count of skipped lines is
/// returned alongside the batches. Every other sentence appears in exactly
/// one batch.
pub fn build_batches(
    corpus: &ParallelCorpus,
    token_budget: usize,
    seed: u64,
) -> (Vec<Batch>, usize) {
    let cost = |i: usize| (corpus.src[i].len() + 1, corpus.tgt[i].len() + 1);
    let mut order: Vec<usize> = Vec::with_capacity(corpus.len());
    let mut skipped = 0usize;
    for i in 0..corpus.len() {
        let (s, t) = cost(i);
        if s + t > token_budget {
            skipped += 1;
        } else {
            order.push(i);
        }
    }

    let mut rng = Rng::new(seed);
    // Shuffle first so equal-length lines land in varying batches, then
    // stable-sort into length buckets.
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| {
        let (s, t) = cost(i);
        s + t
    });

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_s, mut max_t) = (0usize, 0usize);
    for &i in &order {
        let (s, t) = cost(i);
        let new_s = max_s.max(s);
        let new_t = max_t.max(t);
        if !current.is_empty() && (current.len() + 1) * (new_s + new_t) > token_budget {
            batches.push(Batch::from_lines(corpus, std::mem::take(&mut current)));
            max_s = 0;
            max_t = 0;
        }
        max_s = max_s.max(s);
        max_t = max_t.max(t);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch::from_lines(corpus, current));
    }
    rng.shuffle(&mut batches);
    (batches, skipped)
}
