use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK, UNK_TOKEN};

/// Token <-> id bijection with the four reserved specials at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const RESERVED: [&str; 4] = [PAD_TOKEN, EOS_TOKEN, BOS_TOKEN, UNK_TOKEN];

impl Vocabulary {
    /// Build from content tokens; specials are prepended automatically and
    /// duplicates are dropped, so the result is always a bijection.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            v.push(tok.to_string());
        }
        for tok in content {
            v.push(tok.into());
        }
        v
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokens to ids; unknown spellings map to UNK.
    pub fn ids_from_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    /// Ids back to a text line. PAD/BOS/EOS are dropped; out-of-range
    /// ids print as the UNK spelling.
    pub fn line_from_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(f, "{tok}")?;
        }
        f.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        for (i, tok) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*tok) {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("vocabulary file must start with {RESERVED:?}"),
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("duplicate token {tok:?} in vocabulary file"),
                ));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}
