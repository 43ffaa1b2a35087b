//! Synthetic parallel tasks over a small symbol alphabet.
//!
//! Symbols are `a`..`z`, then `aa`, `ab`, ... . Copy, reverse and
//! shift-cipher are bijections, so a single model can learn both
//! directions; sort is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParallelCorpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    /// Adds the shift to every symbol index, modulo the alphabet size.
    ShiftCipher(usize),
    Sort,
}

impl std::str::FromStr for Task {
    type Err = String;

    /// `copy`, `reverse`, `sort`, `shift` (shift 1) or `shift:<k>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            "shift" | "shift-cipher" => Ok(Task::ShiftCipher(1)),
            other => match other.strip_prefix("shift:").or_else(|| other.strip_prefix("shift-cipher:")) {
                Some(k) => k.parse().map(Task::ShiftCipher).map_err(|_| format!("bad shift `{k}`")),
                None => Err(format!("unknown task `{other}` (copy, reverse, shift[:k], sort)")),
            },
        }
    }
}

/// Name of symbol `k`.
pub fn symbol(k: usize) -> String {
    let mut n = k;
    let mut s = Vec::new();
    loop {
        s.push((b'a' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s.iter().rev().collect()
}

/// Index of a symbol name (inverse of [`symbol`]).
pub fn symbol_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_lowercase()) {
        return None;
    }
    let mut n = 0usize;
    for b in s.bytes() {
        n = n * 26 + (b - b'a') as usize + 1;
    }
    Some(n - 1)
}

impl Task {
    /// Applies the task to symbol indices.
    pub fn apply(self, src: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::ShiftCipher(k) => src.iter().map(|&x| (x + k) % vocab).collect(),
            Task::Sort => {
                let mut v = src.to_vec();
                v.sort_unstable();
                v
            }
        }
    }

    /// Inverse mapping, when one exists.
    pub fn invert(self, tgt: &[usize], vocab: usize) -> Option<Vec<usize>> {
        match self {
            Task::Copy => Some(tgt.to_vec()),
            Task::Reverse => Some(tgt.iter().rev().copied().collect()),
            Task::ShiftCipher(k) => Some(tgt.iter().map(|&x| (x + vocab - k % vocab) % vocab).collect()),
            Task::Sort => None,
        }
    }

    pub fn is_bijective(self) -> bool {
        !matches!(self, Task::Sort)
    }

    /// Applies the task to a line of symbol names.
    pub fn apply_line(self, line: &str, vocab: usize) -> Result<String> {
        let idx = line
            .split_whitespace()
            .map(|t| symbol_index(t).filter(|&i| i < vocab))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data(format!("`{line}` has symbols outside the alphabet")))?;
        Ok(render(&self.apply(&idx, vocab)))
    }
}

fn render(idx: &[usize]) -> String {
    idx.iter().map(|&i| symbol(i)).collect::<Vec<_>>().join(" ")
}

/// `n` random pairs with source lengths drawn uniformly from
/// `min_len..=max_len` over `vocab` symbols.
pub fn gen_synthetic(task: Task, n: usize, min_len: usize, max_len: usize, vocab: usize, seed: u64) -> Result<ParallelCorpus> {
    if vocab < 2 {
        return Err(Error::Precondition(format!("synthetic vocabulary needs at least 2 symbols, got {vocab}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Precondition(format!("invalid length range {min_len}..={max_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(min_len..=max_len);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        tgt.push(render(&task.apply(&s, vocab)));
        src.push(render(&s));
    }
    ParallelCorpus::new(src, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_names() {
        assert_eq!(symbol(0), "a");
        assert_eq!(symbol(25), "z");
        assert_eq!(symbol(26), "aa");
        assert_eq!(symbol(27), "ab");
        assert_eq!(symbol(26 + 26), "ba");
        for k in 0..2000 {
            assert_eq!(symbol_index(&symbol(k)), Some(k));
        }
        assert_eq!(symbol_index("A"), None);
    }

    #[test]
    fn task_examples() {
        assert_eq!(Task::Copy.apply_line("a b c", 5).unwrap(), "a b c");
        assert_eq!(Task::Reverse.apply_line("a b c", 5).unwrap(), "c b a");
        assert_eq!(Task::ShiftCipher(1).apply_line("a e", 5).unwrap(), "b a");
        assert_eq!(Task::Sort.apply_line("c a b a", 5).unwrap(), "a a b c");
        assert!(Task::Copy.apply_line("a f", 5).is_err());
    }

    #[test]
    fn parsing() {
        assert_eq!("shift:3".parse::<Task>().unwrap(), Task::ShiftCipher(3));
        assert_eq!("shift".parse::<Task>().unwrap(), Task::ShiftCipher(1));
        assert!("rot13".parse::<Task>().is_err());
    }

    #[test]
    fn bijective_tasks_invert() {
        for task in [Task::Copy, Task::Reverse, Task::ShiftCipher(3), Task::ShiftCipher(7)] {
            let c = gen_synthetic(task, 50, 1, 8, 7, 3).unwrap();
            for (s, t) in c.src.iter().zip(&c.tgt) {
                let ti: Vec<usize> = t.split_whitespace().map(|x| symbol_index(x).unwrap()).collect();
                assert_eq!(render(&task.invert(&ti, 7).unwrap()), *s);
            }
        }
        assert!(!Task::Sort.is_bijective());
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_synthetic(Task::Reverse, 30, 3, 10, 20, 9).unwrap();
        assert_eq!(a, gen_synthetic(Task::Reverse, 30, 3, 10, 20, 9).unwrap());
        assert_ne!(a, gen_synthetic(Task::Reverse, 30, 3, 10, 20, 10).unwrap());
        for (n, _) in a.token_counts() {
            assert!((3..=10).contains(&n));
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(gen_synthetic(Task::Copy, 1, 1, 3, 1, 0).is_err());
        assert!(gen_synthetic(Task::Copy, 1, 4, 3, 5, 0).is_err());
        assert!(gen_synthetic(Task::Copy, 1, 0, 3, 5, 0).is_err());
    }
}
