//! Corpus-level BLEU with clipped n-gram precision and brevity penalty, no
//! smoothing.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Clipped matches and total hypothesis n-grams of one order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: usize,
    pub total: usize,
}

fn ngrams<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_default() += 1;
        }
    }
    m
}

/// Clipped n-gram counts of one sentence pair.
pub fn sentence_stats(hyp: &str, reference: &str, n: usize) -> NgramStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let hc = ngrams(&h, n);
    let rc = ngrams(&r, n);
    NgramStats {
        matches: hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum(),
        total: h.len().saturating_sub(n - 1),
    }
}

/// BLEU in percent. Orders for which the hypotheses contain no n-grams at
/// all are left out of the geometric mean; an order with n-grams but no
/// match gives 0.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Precondition(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Precondition("BLEU of an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Precondition("max_n must be at least 1".into()));
    }
    let mut stats = vec![NgramStats::default(); max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.split_whitespace().count();
        ref_len += r.split_whitespace().count();
        for (k, s) in stats.iter_mut().enumerate() {
            let st = sentence_stats(h, r, k + 1);
            s.matches += st.matches;
            s.total += st.total;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let used: Vec<&NgramStats> = stats.iter().filter(|s| s.total > 0).collect();
    if used.iter().any(|s| s.matches == 0) {
        return Ok(0.0);
    }
    let log_mean = used
        .iter()
        .map(|s| (s.matches as f64 / s.total as f64).ln())
        .sum::<f64>()
        / used.len() as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_mean.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_100() {
        let c = ["the cat sat on the mat", "a b", "x"];
        assert_eq!(bleu(&c, &c, 4).unwrap(), 100.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let s = sentence_stats("the the the", "the cat", 1);
        assert_eq!((s.matches, s.total), (1, 3));
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let h = ["a b c d e"];
        let r = ["a b c x d e"];
        assert_eq!(bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty() {
        let h = ["a b c d"];
        let r = ["a b c d e f g h"];
        let want = 100.0 * (1.0f64 - 2.0).exp();
        assert!((bleu(&h, &r, 4).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn sentence_order_does_not_matter() {
        let h = ["a b c d", "e f g h i", "a c b d"];
        let r = ["a b c d", "e f g x i", "a b c d"];
        let b1 = bleu(&h, &r, 4).unwrap();
        let b2 = bleu(&[h[2], h[0], h[1]], &[r[2], r[0], r[1]], 4).unwrap();
        assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(bleu::<&str, &str>(&[], &[], 4).is_err());
        assert!(bleu(&["a"], &["a", "b"], 4).is_err());
    }
}
