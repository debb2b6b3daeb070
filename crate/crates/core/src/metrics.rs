//! Edit distance and corpus-level character error rate.

use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance between two sequences.
pub fn levenshtein<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over Unicode scalar values.
pub fn char_distance(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    levenshtein(&r, &h)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub utt_id: String,
    pub reference: String,
    pub hypothesis: String,
}

impl EvalPair {
    pub fn new(utt_id: impl Into<String>, reference: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Self {
            utt_id: utt_id.into(),
            reference: reference.into(),
            hypothesis: hypothesis.into(),
        }
    }

    pub fn edits(&self) -> usize {
        char_distance(&self.reference, &self.hypothesis)
    }

    pub fn reference_len(&self) -> usize {
        self.reference.chars().count()
    }
}

/// Pooled edits over pooled reference length, in percent.
pub fn corpus_cer(pairs: &[EvalPair]) -> Result<f64> {
    let (edits, total) = pairs
        .iter()
        .fold((0usize, 0usize), |(e, n), p| (e + p.edits(), n + p.reference_len()));
    if total == 0 {
        return Err(Error::arg("CER undefined: total reference length is zero"));
    }
    Ok(100.0 * edits as f64 / total as f64)
}
