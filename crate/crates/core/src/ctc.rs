//! Connectionist temporal classification: loss, gradient and greedy decoding.
//!
//! The dynamic program always runs in `f64` log space, whatever the scalar
//! type of the logits.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{argmax, log_add, log_softmax, Scalar};

pub const BLANK: usize = 0;

/// Character inventory for CTC targets. Index 0 is the blank; symbol `i`
/// has label id `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    symbols: Vec<char>,
}

impl LabelVocab {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let unique: BTreeSet<char> = symbols.iter().copied().collect();
        if unique.len() != symbols.len() {
            return Err(Error::arg("vocabulary symbols must be unique"));
        }
        Ok(Self { symbols })
    }

    /// Sorted set of all characters appearing in `transcripts`.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = transcripts.into_iter().flat_map(str::chars).collect();
        Self {
            symbols: set.into_iter().collect(),
        }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Output dimension including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::arg(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter(|&&l| l != BLANK)
            .filter_map(|&l| self.symbols.get(l - 1))
            .collect()
    }
}

/// Minimum number of frames able to emit `target`: one per label plus a
/// separating blank between equal neighbours.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs<T: Scalar>(logits: &Matrix<T>, target: &[usize]) -> Result<()> {
    let v = logits.cols();
    if v < 2 {
        return Err(Error::arg("CTC needs at least one label besides the blank"));
    }
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::arg(format!("target label {bad} outside [1, {}]", v - 1)));
    }
    if !logits.all_finite() {
        return Err(Error::arg("logits contain non-finite values"));
    }
    let required = required_frames(target);
    if logits.rows() < required {
        return Err(Error::Infeasible {
            target_len: target.len(),
            required,
            frames: logits.rows(),
        });
    }
    Ok(())
}

struct Lattice {
    /// Blank-interleaved target: `[-, l1, -, l2, …, -]`.
    ext: Vec<usize>,
    /// Per-frame log-probabilities, `T × V`.
    log_probs: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    log_likelihood: f64,
}

impl Lattice {
    fn skip_allowed(&self, s: usize) -> bool {
        s >= 2 && self.ext[s] != BLANK && self.ext[s] != self.ext[s - 2]
    }
}

fn forward<T: Scalar>(logits: &Matrix<T>, target: &[usize]) -> Lattice {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    let log_probs: Vec<Vec<f64>> = logits
        .iter_rows()
        .map(|row| log_softmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();
    let (frames, states) = (log_probs.len(), ext.len());
    let mut lat = Lattice {
        ext,
        log_probs,
        alpha: vec![vec![f64::NEG_INFINITY; states]; frames],
        log_likelihood: 0.0,
    };
    if frames == 0 {
        // Only the empty target is feasible here.
        return lat;
    }
    lat.alpha[0][0] = lat.log_probs[0][BLANK];
    if states > 1 {
        lat.alpha[0][1] = lat.log_probs[0][lat.ext[1]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = lat.alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, lat.alpha[t - 1][s - 1]);
            }
            if lat.skip_allowed(s) {
                acc = log_add(acc, lat.alpha[t - 1][s - 2]);
            }
            lat.alpha[t][s] = acc + lat.log_probs[t][lat.ext[s]];
        }
    }
    let last = &lat.alpha[frames - 1];
    lat.log_likelihood = if states > 1 {
        log_add(last[states - 1], last[states - 2])
    } else {
        last[0]
    };
    lat
}

/// `−log P(target | softmax(logits))` summed over all CTC alignments.
///
/// Returns [`Error::Infeasible`] when `logits` has fewer frames than
/// [`required_frames`].
pub fn ctc_loss<T: Scalar>(logits: &Matrix<T>, target: &[usize]) -> Result<T> {
    check_inputs(logits, target)?;
    Ok(T::of(-forward(logits, target).log_likelihood))
}

/// Loss and `∂loss/∂logits` in one forward-backward pass.
pub fn ctc_loss_and_grad<T: Scalar>(logits: &Matrix<T>, target: &[usize]) -> Result<(T, Matrix<T>)> {
    check_inputs(logits, target)?;
    let lat = forward(logits, target);
    let (frames, states, vocab) = (lat.log_probs.len(), lat.ext.len(), logits.cols());
    let mut grad = Matrix::zeros(frames, vocab);
    if frames == 0 {
        return Ok((T::zero(), grad));
    }

    // beta[s]: log-probability of emitting the remaining suffix after the
    // current frame, given state s at the current frame.
    let mut beta = vec![f64::NEG_INFINITY; states];
    beta[states - 1] = 0.0;
    if states > 1 {
        beta[states - 2] = 0.0;
    }
    let ll = lat.log_likelihood;
    for t in (0..frames).rev() {
        // Occupation posteriors at frame t.
        let mut occupancy = vec![f64::NEG_INFINITY; vocab];
        for s in 0..states {
            let k = lat.ext[s];
            occupancy[k] = log_add(occupancy[k], lat.alpha[t][s] + beta[s]);
        }
        let row = grad.row_mut(t);
        for k in 0..vocab {
            let p = lat.log_probs[t][k].exp();
            let posterior = (occupancy[k] - ll).exp();
            row[k] = T::of(p - posterior);
        }
        if t == 0 {
            break;
        }
        let emit = &lat.log_probs[t];
        let mut prev = vec![f64::NEG_INFINITY; states];
        for s in 0..states {
            let mut acc = emit[lat.ext[s]] + beta[s];
            if s + 1 < states {
                acc = log_add(acc, emit[lat.ext[s + 1]] + beta[s + 1]);
            }
            if s + 2 < states && lat.skip_allowed(s + 2) {
                acc = log_add(acc, emit[lat.ext[s + 2]] + beta[s + 2]);
            }
            prev[s] = acc;
        }
        beta = prev;
    }
    Ok((T::of(-ll), grad))
}

/// Gradient of [`ctc_loss`] with respect to the raw logits.
pub fn ctc_grad<T: Scalar>(logits: &Matrix<T>, target: &[usize]) -> Result<Matrix<T>> {
    ctc_loss_and_grad(logits, target).map(|(_, g)| g)
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.iter_rows() {
        let best = argmax(row).unwrap_or(BLANK);
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, vocab: usize) -> Matrix<f64> {
        Matrix::zeros(frames, vocab)
    }

    fn path(labels: &[usize], vocab: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(labels.len(), vocab);
        for (t, &l) in labels.iter().enumerate() {
            m.set(t, l, 10.0);
        }
        m
    }

    #[test]
    fn single_frame_single_label() {
        let loss = ctc_loss(&uniform(1, 2), &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        // Paths aa, a-, -a out of four: P = 3/4.
        let loss = ctc_loss(&uniform(2, 2), &[1]).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((loss - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn repeated_labels_need_a_blank() {
        assert_eq!(required_frames(&[1, 1]), 3);
        assert_eq!(required_frames(&[1, 2, 2, 2]), 6);
        match ctc_loss(&uniform(1, 2), &[1, 1]) {
            Err(Error::Infeasible { required: 3, frames: 1, .. }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(ctc_loss(&uniform(3, 2), &[1, 1]).is_ok());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let loss = ctc_loss(&uniform(3, 4), &[]).unwrap();
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(ctc_loss(&uniform(0, 4), &[]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_labels_are_argument_errors() {
        assert!(matches!(ctc_loss(&uniform(3, 3), &[0]), Err(Error::Argument(_))));
        assert!(matches!(ctc_loss(&uniform(3, 3), &[3]), Err(Error::Argument(_))));
        let mut bad = uniform(2, 3);
        bad.set(0, 0, f64::NAN);
        assert!(ctc_loss(&bad, &[1]).is_err());
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Matrix::from_rows(&[
            vec![0.3, -1.0, 2.0],
            vec![1.5, 0.2, -0.4],
            vec![-0.2, 0.8, 0.1],
        ])
        .unwrap();
        let g = ctc_grad(&logits, &[1, 2]).unwrap();
        for row in g.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_have_tiny_gradient() {
        let logits = path(&[1, 1, 0, 2, 2], 3);
        let (loss, g) = ctc_loss_and_grad(&logits, &[1, 2]).unwrap();
        assert!(loss < 1e-3);
        assert!(g.frobenius_norm() < 1e-3);
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(greedy_decode(&path(&[1, 1, 0, 2], 3)), vec![1, 2]);
        assert!(greedy_decode(&path(&[0, 0, 0], 3)).is_empty());
        assert_eq!(greedy_decode(&path(&[1, 0, 1], 3)), vec![1, 1]);
        // Ties resolve to the lowest index: uniform rows decode to blank.
        assert!(greedy_decode(&uniform(4, 3)).is_empty());
    }

    #[test]
    fn vocab_encodes_and_decodes() {
        let v = LabelVocab::from_transcripts(["ba", "ac"]);
        assert_eq!(v.symbols(), &['a', 'b', 'c']);
        assert_eq!(v.size(), 4);
        assert_eq!(v.encode("cab").unwrap(), vec![3, 1, 2]);
        assert_eq!(v.decode(&[3, 0, 1]), "ca");
        assert!(v.encode("z").is_err());
        assert!(LabelVocab::new(vec!['a', 'a']).is_err());
    }
}
