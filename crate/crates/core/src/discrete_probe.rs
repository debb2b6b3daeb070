//! Stage-2 downstream model on discrete tokens: a randomly initialized
//! embedding table followed by the linear CTC probe.
//!
//! BPE tokens can stand for several base units, so the head may emit
//! several output frames ("slots") per input token; with one slot the model
//! is a plain embedding + linear probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::ctc::{ctc_loss_and_grad, required_frames, LabelVocab};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::corpus_cer;
use crate::probe::{eval_pairs, length_sorted_batches, parse_row, shuffled, write_row, Adam, ProbeModel, TrainConfig};
use crate::quantizer::Codebook;
use crate::scalar::Scalar;
use crate::sidecar::Transcripts;
use crate::tokenproc::UnitSequence;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_DISCRETE_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteConfig {
    pub train: TrainConfig,
    pub embedding_dim: usize,
    /// Output frames per input token.
    pub slots: usize,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                learning_rate: DEFAULT_DISCRETE_LR,
                ..TrainConfig::default()
            },
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            slots: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteProbeModel<T> {
    embedding: Matrix<T>,
    head: ProbeModel<T>,
}

impl<T: Scalar> DiscreteProbeModel<T> {
    /// Embedding rows ~ N(0, 1/E) (standard deviation 1/√E); head as
    /// [`ProbeModel::init`].
    pub fn init(vocab_size: usize, embedding_dim: usize, labels: LabelVocab, slots: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || embedding_dim == 0 {
            return Err(Error::arg("token vocabulary and embedding dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (embedding_dim as f64).sqrt()).expect("positive std");
        let data = (0..vocab_size * embedding_dim)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        let embedding = Matrix::from_vec(vocab_size, embedding_dim, data)?;
        let head = ProbeModel::init(embedding_dim, labels, slots, &mut rng)?;
        Ok(Self { embedding, head })
    }

    /// Diagnostic model whose embedding rows are the codebook centroids, so
    /// that unit `k` is fed to `head` exactly as centroid `k` would be.
    pub fn from_codebook(codebook: &Codebook<T>, head: ProbeModel<T>) -> Result<Self> {
        Self::from_parts(codebook.centroids().clone(), head)
    }

    pub fn from_parts(embedding: Matrix<T>, head: ProbeModel<T>) -> Result<Self> {
        if embedding.cols() != head.input_dim() || embedding.rows() == 0 {
            return Err(Error::arg("embedding width differs from probe input dimension"));
        }
        Ok(Self { embedding, head })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }

    pub fn head(&self) -> &ProbeModel<T> {
        &self.head
    }

    pub fn labels(&self) -> &LabelVocab {
        self.head.vocab()
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(tokens.len(), self.embedding_dim());
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.vocab_size() {
                return Err(Error::arg(format!(
                    "token {tok} outside embedding table of size {}",
                    self.vocab_size()
                )));
            }
            out.row_mut(t).copy_from_slice(self.embedding.row(tok));
        }
        Ok(out)
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        self.head.forward(&self.embed(tokens)?)
    }

    pub fn transcribe(&self, tokens: &[u32]) -> Result<String> {
        self.head.transcribe(&self.embed(tokens)?)
    }

    /// Probe text block followed by `embedding N E` and N rows.
    pub fn to_text(&self) -> String {
        let mut s = self.head.to_text();
        let _ = writeln!(s, "embedding {} {}", self.vocab_size(), self.embedding_dim());
        for row in self.embedding.iter_rows() {
            write_row(&mut s, row);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let (head, next) = ProbeModel::parse_block(&mut lines)?;
        let header = next.ok_or_else(|| Error::format("missing embedding block"))?;
        let dims: Vec<usize> = header
            .strip_prefix("embedding ")
            .ok_or_else(|| Error::format(format!("expected embedding header, got `{header}`")))?
            .split_ascii_whitespace()
            .map(|t| t.parse().map_err(|_| Error::format("bad embedding header")))
            .collect::<Result<_>>()?;
        let [n, e] = dims[..] else {
            return Err(Error::format("bad embedding header"));
        };
        let mut data = Vec::with_capacity(n * e);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| Error::format("embedding block truncated"))?;
            data.extend(parse_row::<T>(line, e)?);
        }
        Self::from_parts(Matrix::from_vec(n, e, data)?, head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteOutput<T> {
    pub model: DiscreteProbeModel<T>,
    /// Mean CTC loss per epoch over feasible utterances.
    pub loss_history: Vec<f64>,
    /// Utterances skipped because their token stream is too short for CTC.
    pub skipped: usize,
}

/// Whether `tokens` can emit `target` under CTC with `slots` frames per token.
fn feasible(tokens: usize, slots: usize, target: &[usize]) -> bool {
    tokens * slots >= required_frames(target)
}

/// Train embedding + probe on token streams.
pub fn train_discrete<T: Scalar>(
    corpus: &[UnitSequence],
    transcripts: &Transcripts,
    vocab_size: usize,
    config: &DiscreteConfig,
) -> Result<DiscreteOutput<T>> {
    let cfg = &config.train;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::arg("token corpus is empty"));
    }
    if config.slots == 0 {
        return Err(Error::arg("slots must be at least 1"));
    }
    if let Some(bad) = corpus.iter().flat_map(|s| &s.units).find(|&&u| u as usize >= vocab_size) {
        return Err(Error::arg(format!("token {bad} not below vocab size {vocab_size}")));
    }
    let mut texts = Vec::with_capacity(corpus.len());
    for seq in corpus {
        let text = transcripts
            .get(&seq.utt_id)
            .ok_or_else(|| Error::arg(format!("no transcript for `{}`", seq.utt_id)))?;
        texts.push(text.as_str());
    }
    let labels = LabelVocab::from_transcripts(texts.iter().copied());
    if labels.symbols().is_empty() {
        return Err(Error::arg("training transcripts contain no characters"));
    }
    let targets = texts
        .iter()
        .map(|t| labels.encode(t))
        .collect::<Result<Vec<_>>>()?;

    let mut skipped = 0;
    let mut usable = Vec::new();
    for (i, seq) in corpus.iter().enumerate() {
        if feasible(seq.units.len(), config.slots, &targets[i]) {
            usable.push(i);
        } else {
            skipped += 1;
        }
    }
    let mut model = DiscreteProbeModel::<T>::init(vocab_size, config.embedding_dim, labels, config.slots, cfg.seed)?;
    if usable.is_empty() {
        return Err(Error::Training("every utterance is CTC-infeasible".into()));
    }

    let keys: Vec<(usize, &str)> = usable
        .iter()
        .map(|&i| (corpus[i].units.len(), corpus[i].utt_id.as_str()))
        .collect();
    let batches = length_sorted_batches(&keys, cfg.batch_size);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut head_opt = model.head.optimizer();
    let mut emb_opt = Adam::new(model.embedding.as_slice().len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for b in shuffled(&batches, &mut shuffle_rng) {
            let results: Vec<Result<_>> = batches[b]
                .par_iter()
                .map(|&k| {
                    let i = usable[k];
                    let tokens = &corpus[i].units;
                    let x = model.embed(tokens)?;
                    let logits = model.head.forward(&x)?;
                    let (loss, g) = ctc_loss_and_grad(&logits, &targets[i])?;
                    let (pg, dx) = model.head.backward(&x, &g)?;
                    Ok((loss.as_f64(), pg, dx, i))
                })
                .collect();
            let n = results.len();
            let inv = T::one() / T::of_usize(n);
            let mut emb_grad = Matrix::<T>::zeros(model.vocab_size(), model.embedding_dim());
            let mut head_grad = None;
            for r in results {
                let (loss, pg, dx, i) = r?;
                epoch_loss += loss;
                for (t, &tok) in corpus[i].units.iter().enumerate() {
                    for (g, &d) in emb_grad.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
                        *g += d;
                    }
                }
                match &mut head_grad {
                    None => head_grad = Some(pg),
                    Some(acc) => {
                        acc.weight.add_assign(&pg.weight);
                        acc.bias.iter_mut().zip(&pg.bias).for_each(|(a, &g)| *a += g);
                    }
                }
            }
            count += n;
            let mut pg = head_grad.expect("batches are non-empty");
            pg.weight.scale(inv);
            pg.bias.iter_mut().for_each(|g| *g *= inv);
            emb_grad.scale(inv);
            model.head.apply(&pg, &mut head_opt, cfg.learning_rate, cfg);
            emb_opt.update(model.embedding.as_mut_slice(), emb_grad.as_slice(), cfg.learning_rate, cfg);
            if !model.head.is_finite() || !model.embedding.all_finite() {
                return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
            }
        }
        history.push(epoch_loss / count.max(1) as f64);
    }
    Ok(DiscreteOutput {
        model,
        loss_history: history,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEval {
    /// Corpus CER in percent over every utterance, infeasible ones included.
    pub cer: f64,
    /// Utterances whose token stream is too short to emit the reference.
    pub skipped: usize,
    pub hypotheses: BTreeMap<String, String>,
}

pub fn evaluate_discrete<T: Scalar>(
    model: &DiscreteProbeModel<T>,
    corpus: &[UnitSequence],
    transcripts: &Transcripts,
) -> Result<DiscreteEval> {
    if corpus.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let hypotheses: BTreeMap<String, String> = corpus
        .par_iter()
        .map(|seq| Ok((seq.utt_id.clone(), model.transcribe(&seq.units)?)))
        .collect::<Result<_>>()?;
    let pairs = eval_pairs(&hypotheses, transcripts, model.labels())?;
    let mut skipped = 0;
    for seq in corpus {
        let target = model.labels().encode(&transcripts[&seq.utt_id])?;
        if !feasible(seq.units.len(), model.head().slots(), &target) {
            skipped += 1;
        }
    }
    Ok(DiscreteEval {
        cer: corpus_cer(&pairs)?,
        skipped,
        hypotheses,
    })
}

/// Relative CER gap in percent: `100 · (discrete − continuous) / continuous`.
pub fn gap_report(continuous_cer: f64, discrete_cer: f64) -> Result<f64> {
    if !(continuous_cer > 0.0) {
        return Err(Error::arg("relative gap undefined for a zero continuous CER"));
    }
    Ok(100.0 * (discrete_cer - continuous_cer) / continuous_cer)
}
