use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::vocab::Vocabulary;
use super::{DataError, BOS, EOS, PAD, UNK, UNK_TOKEN};

/// Marker appended to the last subword of every word so decoding can
/// restore word boundaries.
pub const WORD_END: &str = "</w>";

/// Ordered byte-pair-encoding merges plus the character inventory they
/// were trained over. Applying the merges in order is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    inventory: BTreeSet<String>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let n = word.chars().count();
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{WORD_END}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Greedy highest-frequency pair merging; ties break lexicographically on
/// the pair; stops early once no adjacent pair occurs at least twice.
pub fn bpe_train<S: AsRef<str>>(
    lines: &[S],
    num_merges: usize,
) -> Result<SubwordModel, DataError> {
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in lines {
        for word in line.as_ref().split_whitespace() {
            *word_counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(DataError::EmptyCorpus);
    }

    let mut inventory = BTreeSet::new();
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| {
            let syms = word_symbols(&w);
            inventory.extend(syms.iter().cloned());
            (syms, c)
        })
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, count) in &words {
            for win in syms.windows(2) {
                *pair_counts
                    .entry((win[0].as_str(), win[1].as_str()))
                    .or_insert(0) += count;
            }
        }
        // BTreeMap iteration is lexicographic, so the first maximum is the
        // lexicographically smallest pair among ties.
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&pair, &count)| (pair.0.to_string(), pair.1.to_string(), count));
        match best {
            Some((l, r, count)) if count >= 2 => {
                for (syms, _) in &mut words {
                    *syms = apply_merge(syms, &l, &r);
                }
                merges.push((l, r));
            }
            _ => break,
        }
    }

    Ok(SubwordModel { merges, inventory })
}

impl SubwordModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn inventory(&self) -> &BTreeSet<String> {
        &self.inventory
    }

    /// Segment one whitespace-delimited word.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        for (l, r) in &self.merges {
            if syms.len() < 2 {
                break;
            }
            syms = apply_merge(&syms, l, r);
        }
        syms
    }

    /// All producible symbols: inventory characters (sorted), then merge
    /// outputs in merge order.
    pub fn vocabulary(&self) -> Vocabulary {
        let content = self
            .inventory
            .iter()
            .cloned()
            .chain(self.merges.iter().map(|(l, r)| format!("{l}{r}")));
        Vocabulary::new(content)
    }

    /// One merge per line, "left right", in application order.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (l, r) in &self.merges {
            writeln!(f, "{l} {r}")?;
        }
        f.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut merges = Vec::new();
        let mut inventory = BTreeSet::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let Some((l, r)) = line.split_once(' ') else {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("merge file line {}: expected \"left right\"", ln + 1),
                ));
            };
            inventory.insert(l.to_string());
            inventory.insert(r.to_string());
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(SubwordModel { merges, inventory })
    }
}

pub fn bpe_encode(model: &SubwordModel, vocab: &Vocabulary, line: &str) -> Vec<usize> {
    let mut ids = Vec::new();
    for word in line.split_whitespace() {
        for seg in model.segment(word) {
            // A corpus segment spelling a reserved token maps to UNK, so
            // reserved ids are never produced from text.
            ids.push(match vocab.id(&seg) {
                Some(id) if id > UNK => id,
                _ => UNK,
            });
        }
    }
    ids
}

/// Inverse of encode on in-inventory text. Reserved ids render as markers
/// (UNK) or nothing (PAD, BOS, EOS); out-of-range ids render as nothing.
pub fn bpe_decode(vocab: &Vocabulary, ids: &[usize]) -> String {
    let mut out = String::new();
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            UNK => out.push_str(UNK_TOKEN),
            _ => {
                if let Some(tok) = vocab.token(id) {
                    match tok.strip_suffix(WORD_END) {
                        Some(stem) => {
                            out.push_str(stem);
                            out.push(' ');
                        }
                        None => out.push_str(tok),
                    }
                }
            }
        }
    }
    out.trim_end().to_string()
}
