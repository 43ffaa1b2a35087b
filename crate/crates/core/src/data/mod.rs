//! Text side: vocabularies, parallel corpora, subword segmentation,
//! synthetic tasks and BLEU.

pub mod bleu;
pub mod bpe;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, RESERVED, UNK};
use crate::train::PairSet;

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id mapping; ids `0..4` are reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from tokens in the given order, skipping duplicates and
    /// reserved spellings.
    pub fn from_tokens<I: IntoIterator<Item = S>, S: AsRef<str>>(tokens: I) -> Self {
        let mut v = Self {
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            v.index.insert(t.to_string(), i);
        }
        for t in tokens {
            let t = t.as_ref();
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    /// Every whitespace token of `lines`, most frequent first, ties in
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(lines: &[S]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in lines {
            for t in l.as_ref().split_whitespace() {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|e| e.0))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `k` is id `k + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&read_text(path)?))
    }
}

/// Reads a whole UTF-8 file, reporting missing files as data errors.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l.as_ref());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Aligned source and target sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Data(format!(
                "parallel files differ in length: {} source vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        Ok(Self { src, tgt })
    }

    pub fn load(src: &Path, tgt: &Path) -> Result<Self> {
        Self::new(read_lines(src)?, read_lines(tgt)?)
    }

    pub fn save(&self, src: &Path, tgt: &Path) -> Result<()> {
        write_lines(src, &self.src)?;
        write_lines(tgt, &self.tgt)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// `(source, target)` whitespace token counts per line.
    pub fn token_counts(&self) -> Vec<(usize, usize)> {
        self.src
            .iter()
            .zip(&self.tgt)
            .map(|(s, t)| (s.split_whitespace().count(), t.split_whitespace().count()))
            .collect()
    }

    /// Drops pairs with an empty side or a side longer than `max_len`
    /// tokens.
    pub fn filtered(&self, max_len: usize) -> Self {
        let keep = |s: &str| {
            let n = s.split_whitespace().count();
            n > 0 && n <= max_len
        };
        let (src, tgt) = self
            .src
            .iter()
            .zip(&self.tgt)
            .filter(|(s, t)| keep(s) && keep(t))
            .map(|(s, t)| (s.clone(), t.clone()))
            .unzip();
        Self { src, tgt }
    }

    pub fn to_pairs(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> PairSet {
        PairSet {
            pairs: self
                .src
                .iter()
                .zip(&self.tgt)
                .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
                .collect(),
        }
    }
}
