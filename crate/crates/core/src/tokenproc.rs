//! Post-processing of discrete unit streams: run-length de-duplication,
//! byte-pair encoding over integer tokens, and bitrate accounting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Default number of BPE merges learned over unit streams.
pub const DEFAULT_BPE_MERGES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub utt_id: String,
    pub units: Vec<u32>,
}

impl UnitSequence {
    pub fn new(utt_id: impl Into<String>, units: Vec<u32>) -> Self {
        Self {
            utt_id: utt_id.into(),
            units,
        }
    }
}

/// Collapse every run of equal adjacent units to a single unit.
pub fn dedup_units(units: &[u32]) -> Vec<u32> {
    let mut out = units.to_vec();
    out.dedup();
    out
}

pub fn dedup(seq: &UnitSequence) -> UnitSequence {
    UnitSequence::new(seq.utt_id.clone(), dedup_units(&seq.units))
}

/// A learned merge: `(left, right) → token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub token: u32,
}

/// Ordered merge rules over a base inventory `0..base_vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    base_vocab_size: u32,
    merges: Vec<Merge>,
}

impl BpeModel {
    pub fn new(base_vocab_size: u32, merges: Vec<Merge>) -> Result<Self> {
        for (i, m) in merges.iter().enumerate() {
            let defined = base_vocab_size as u64 + i as u64;
            if m.token as u64 != defined {
                return Err(Error::Validation(format!(
                    "merge {i} creates token {}, expected {defined}",
                    m.token
                )));
            }
            if m.left as u64 >= defined || m.right as u64 >= defined {
                return Err(Error::Validation(format!(
                    "merge {i} references a token not yet defined"
                )));
            }
        }
        Ok(Self {
            base_vocab_size,
            merges,
        })
    }

    pub fn base_vocab_size(&self) -> u32 {
        self.base_vocab_size
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn vocab_size(&self) -> u32 {
        self.base_vocab_size + self.merges.len() as u32
    }

    /// Model keeping only the first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            base_vocab_size: self.base_vocab_size,
            merges: self.merges[..n.min(self.merges.len())].to_vec(),
        }
    }

    /// Number of base units each token expands to.
    pub fn token_lengths(&self) -> Vec<usize> {
        let mut lens = vec![1usize; self.base_vocab_size as usize];
        for m in &self.merges {
            lens.push(lens[m.left as usize] + lens[m.right as usize]);
        }
        lens
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dsu-bpe v1 {}\n", self.base_vocab_size);
        for m in &self.merges {
            let _ = writeln!(s, "{} {} {}", m.left, m.right, m.token);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty BPE model file"))?;
        let base = header
            .strip_prefix("dsu-bpe v1 ")
            .and_then(|b| b.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::format(format!("bad BPE header `{header}`")))?;
        let merges = lines
            .map(|line| {
                let nums: Vec<u32> = line
                    .split_ascii_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::format(format!("bad merge line `{line}`"))))
                    .collect::<Result<_>>()?;
                match nums[..] {
                    [left, right, token] => Ok(Merge { left, right, token }),
                    _ => Err(Error::format(format!("merge line needs 3 fields: `{line}`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Replace every non-overlapping `(left, right)` occurrence, scanning left to right.
fn apply_merge(tokens: &[u32], m: &Merge) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() && tokens[i] == m.left && tokens[i + 1] == m.right {
            out.push(m.token);
            i += 2;
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    out
}

/// Learn up to `num_merges` merges. Each step merges the most frequent
/// adjacent pair (ties go to the smallest `(left, right)`); learning stops
/// early once no pair occurs at least twice.
pub fn bpe_train(corpus: &[UnitSequence], base_vocab_size: u32, num_merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::arg("BPE training corpus is empty"));
    }
    let mut seqs: Vec<Vec<u32>> = Vec::with_capacity(corpus.len());
    for seq in corpus {
        check_units(&seq.units, base_vocab_size)?;
        seqs.push(seq.units.clone());
    }
    let mut merges = Vec::new();
    for step in 0..num_merges {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let merge = Merge {
            left,
            right,
            token: base_vocab_size + step as u32,
        };
        for s in &mut seqs {
            *s = apply_merge(s, &merge);
        }
        merges.push(merge);
    }
    BpeModel::new(base_vocab_size, merges)
}

fn check_units(units: &[u32], bound: u32) -> Result<()> {
    match units.iter().find(|&&u| u >= bound) {
        Some(u) => Err(Error::arg(format!("unit {u} outside vocabulary of size {bound}"))),
        None => Ok(()),
    }
}

/// Encode a unit stream by applying every merge in learned order.
pub fn bpe_encode(units: &[u32], model: &BpeModel) -> Result<Vec<u32>> {
    check_units(units, model.base_vocab_size)?;
    let mut tokens = units.to_vec();
    for m in &model.merges {
        if tokens.len() < 2 {
            break;
        }
        tokens = apply_merge(&tokens, m);
    }
    Ok(tokens)
}

/// Expand merged tokens back to base units.
pub fn bpe_decode(tokens: &[u32], model: &BpeModel) -> Result<Vec<u32>> {
    check_units(tokens, model.vocab_size())?;
    let base = model.base_vocab_size;
    let mut out = Vec::with_capacity(tokens.len());
    let mut stack: Vec<u32> = Vec::new();
    for &tok in tokens {
        stack.push(tok);
        while let Some(t) = stack.pop() {
            if t < base {
                out.push(t);
            } else {
                let m = &model.merges[(t - base) as usize];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
    }
    Ok(out)
}

/// Fixed-width coding rate: `tokens · log2(vocab_size) / seconds`.
pub fn bitrate(token_count: usize, vocab_size: u32, total_seconds: f64) -> Result<f64> {
    if !(total_seconds > 0.0) || !total_seconds.is_finite() {
        return Err(Error::arg("total duration must be positive"));
    }
    if vocab_size < 2 {
        return Err(Error::arg("vocabulary size must be at least 2"));
    }
    Ok(token_count as f64 * (vocab_size as f64).log2() / total_seconds)
}

/// [`bitrate`] over a corpus of token sequences.
pub fn corpus_bitrate(corpus: &[UnitSequence], vocab_size: u32, total_seconds: f64) -> Result<f64> {
    let count = corpus.iter().map(|s| s.units.len()).sum();
    bitrate(count, vocab_size, total_seconds)
}
