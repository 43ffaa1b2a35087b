//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters, the last one carrying the end-of-word
//! marker `</w>`. Learning repeatedly merges the most frequent adjacent pair
//! (ties broken by the lexicographically smallest pair) until the requested
//! number of merges is reached or no pair occurs at least twice.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const MIN_PAIR_COUNT: usize = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns at most `merges` merge operations from whitespace-tokenized lines.
pub fn learn_bpe<S: AsRef<str>>(lines: &[S], merges: usize) -> Result<BpeModel> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for l in lines {
        for w in l.as_ref().split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, n)| (split_word(w), n)).collect();
    words.sort();
    let mut model = BpeModel::default();
    while model.merges.len() < merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((a, b), count)) = best else { break };
        if count < MIN_PAIR_COUNT {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in words.iter_mut() {
            *syms = merge_pair(syms, &a, &b);
        }
        model.merges.push((a, b));
    }
    Ok(model)
}

impl BpeModel {
    /// Segments one whitespace-tokenized line.
    pub fn apply(&self, line: &str) -> Vec<String> {
        let rank: HashMap<(&str, &str), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.as_str(), b.as_str()), i))
            .collect();
        let mut out = Vec::new();
        for word in line.split_whitespace() {
            let mut syms = split_word(word);
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|w| rank.get(&(w[0].as_str(), w[1].as_str())).copied())
                    .min();
                let Some(r) = best else { break };
                let (a, b) = &self.merges[r];
                syms = merge_pair(&syms, a, b);
            }
            out.extend(syms);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#version 1\n");
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("#version 1") {
            return Err(Error::Data("BPE model must start with `#version 1`".into()));
        }
        let mut merges = Vec::new();
        for (n, l) in lines.enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let mut parts = l.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(Error::Data(format!("BPE model line {}: expected two symbols", n + 2))),
            }
        }
        Ok(Self { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&super::read_text(path)?)
    }
}

/// Joins subword tokens back into whitespace-separated words.
pub fn undo_bpe<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut words = Vec::new();
    let mut cur = String::new();
    for t in tokens {
        let t = t.as_ref();
        match t.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(t),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_merges_is_character_level() {
        let m = learn_bpe(&["low lower"], 0).unwrap();
        assert!(m.merges.is_empty());
        assert_eq!(m.apply("low"), vec!["l", "o", "w</w>"]);
    }

    #[test]
    fn most_frequent_pair_first() {
        let m = learn_bpe(&["aaab aaab"], 1).unwrap();
        assert_eq!(m.merges, vec![("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b) and (c,d</w>) ... every pair occurs twice; (a, b) is smallest.
        let m = learn_bpe(&["abcd abcd"], 1).unwrap();
        assert_eq!(m.merges[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_bpe(&["xyz"], 10).unwrap();
        assert!(m.merges.is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(learn_bpe::<&str>(&[], 5).is_err());
        assert!(learn_bpe(&["   "], 5).is_err());
    }

    #[test]
    fn unseen_characters_fall_through() {
        let m = learn_bpe(&["aaab aaab"], 3).unwrap();
        assert_eq!(m.apply("xy"), vec!["x", "y</w>"]);
        assert!(m.apply("").is_empty());
    }

    #[test]
    fn learned_merges_apply_and_undo() {
        let lines = ["the cat sat on the mat", "the hat is on the cat"];
        let m = learn_bpe(&lines, 20).unwrap();
        for l in lines {
            let toks = m.apply(l);
            assert!(toks.len() < l.replace(' ', "").len());
            assert_eq!(undo_bpe(&toks), l);
        }
        assert_eq!(BpeModel::parse(&m.to_text()).unwrap(), m);
        assert!(BpeModel::parse("a b\n").is_err());
    }

    #[test]
    fn deterministic() {
        let lines = ["ab ab cd cd ef", "abcd efab"];
        assert_eq!(learn_bpe(&lines, 8).unwrap(), learn_bpe(&lines, 8).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip(words in prop::collection::vec("[a-e]{1,6}", 0..8), merges in 0usize..15) {
            let line = words.join(" ");
            let m = learn_bpe(&["abc abd bcd ace ddd eab", "aaa bbb abc"], merges).unwrap();
            prop_assert_eq!(undo_bpe(&m.apply(&line)), line);
        }
    }
}
