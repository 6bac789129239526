use std::fmt;
use std::str::FromStr;

use super::vocab::Vocabulary;
use super::{DataError, ParallelCorpus, UNK};
use crate::tensor::Rng;

/// Substitution cipher seed; fixed so that the cipher is a property of the
/// vocabulary size alone, not of the corpus seed.
const CIPHER_SEED: u64 = 0x7265_6f72_6465_72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    CipherReorder,
}

impl FromStr for SyntheticTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "cipher_reorder" => Ok(SyntheticTask::CipherReorder),
            other => Err(format!(
                "unknown task {other:?}; expected copy, reverse, or cipher_reorder"
            )),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::CipherReorder => "cipher_reorder",
        })
    }
}

/// Bijective substitution over the content ids `UNK+1..vocab_size`.
pub fn cipher(vocab_size: usize) -> Vec<usize> {
    let lo = UNK + 1;
    let mut rng = Rng::new(CIPHER_SEED);
    let perm = rng.permutation(vocab_size - lo);
    let mut map = vec![0; vocab_size];
    for (i, slot) in map.iter_mut().enumerate().take(lo) {
        *slot = i;
    }
    for (i, &p) in perm.iter().enumerate() {
        map[lo + i] = lo + p;
    }
    map
}

fn apply_task(task: SyntheticTask, src: &[usize], sigma: &[usize]) -> Vec<usize> {
    match task {
        SyntheticTask::Copy => src.to_vec(),
        SyntheticTask::Reverse => src.iter().rev().copied().collect(),
        SyntheticTask::CipherReorder => {
            let mut out: Vec<usize> = src.iter().map(|&t| sigma[t]).collect();
            let mut i = 0;
            while i + 1 < out.len() {
                out.swap(i, i + 1);
                i += 2;
            }
            out
        }
    }
}

/// Deterministic synthetic parallel corpus. Content tokens are drawn
/// uniformly from the non-reserved id range; lengths uniformly from
/// `len_range` inclusive.
pub fn gen_synthetic(
    task: SyntheticTask,
    n_pairs: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ParallelCorpus, DataError> {
    if vocab_size < 8 {
        return Err(DataError::VocabTooSmall(vocab_size));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(DataError::BadLenRange { lo, hi });
    }
    let sigma = cipher(vocab_size);
    let mut rng = Rng::new(seed);
    let mut src = Vec::with_capacity(n_pairs);
    let mut tgt = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.range(lo, hi);
        let line: Vec<usize> = (0..len)
            .map(|_| rng.range(UNK + 1, vocab_size - 1))
            .collect();
        tgt.push(apply_task(task, &line, &sigma));
        src.push(line);
    }
    ParallelCorpus::new(src, tgt)
}

/// Vocabulary whose content tokens spell their own ids: "w4", "w5", ...
pub fn synthetic_vocab(vocab_size: usize) -> Result<Vocabulary, DataError> {
    if vocab_size < 8 {
        return Err(DataError::VocabTooSmall(vocab_size));
    }
    Ok(Vocabulary::new(
        (UNK + 1..vocab_size).map(|k| format!("w{k}")),
    ))
}
