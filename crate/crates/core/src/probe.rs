//! Linear CTC probe and the Stage-1 trainer that learns layer weights.
//!
//! Forward: `h* = weighted_sum(layers, λ)`, `logits = h* W + b`, loss = CTC.
//! Backward: `ctc_grad` feeds the projection gradients and, through
//! `weighted_sum_grad`, the gradient on λ. Adam updates both.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregator::{weighted_sum, weighted_sum_grad, AggregationMode, LayerWeights};
use crate::ctc::{ctc_loss_and_grad, greedy_decode, LabelVocab};
use crate::error::{Error, Result};
use crate::feature_store::FeatureArchive;
use crate::matrix::Matrix;
use crate::metrics::{corpus_cer, EvalPair};
use crate::scalar::Scalar;
use crate::sidecar::Transcripts;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Adam step size for the projection and bias (and embeddings).
    pub learning_rate: f64,
    /// Adam step size for the layer logits λ.
    pub lambda_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lambda_learning_rate: 1e-2,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.lambda_learning_rate > 0.0) {
            return Err(Error::arg("learning rates must be positive"));
        }
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return Err(Error::arg("Adam betas must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::arg("Adam eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }
}

/// First/second moment state for one parameter tensor.
#[derive(Debug, Clone)]
pub(crate) struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub(crate) fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::of(lr), T::of(cfg.adam_eps));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Linear CTC head: `D_in → slots × V`. Each input frame produces `slots`
/// consecutive output frames; the continuous probe uses one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<T> {
    weight: Matrix<T>,
    bias: Vec<T>,
    vocab: LabelVocab,
    slots: usize,
}

/// Gradients of a probe for one batch.
#[derive(Debug, Clone)]
pub(crate) struct ProbeGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ProbeModel<T> {
    /// W ~ U[−1/√D_in, 1/√D_in], b = 0.
    pub fn init(input_dim: usize, vocab: LabelVocab, slots: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || slots == 0 {
            return Err(Error::arg("probe needs positive input dimension and slot count"));
        }
        let cols = slots * vocab.size();
        let bound = 1.0 / (input_dim as f64).sqrt();
        let data = (0..input_dim * cols)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Ok(Self {
            weight: Matrix::from_vec(input_dim, cols, data)?,
            bias: vec![T::zero(); cols],
            vocab,
            slots,
        })
    }

    pub fn from_parts(weight: Matrix<T>, bias: Vec<T>, vocab: LabelVocab, slots: usize) -> Result<Self> {
        if slots == 0 || weight.cols() != slots * vocab.size() || bias.len() != weight.cols() {
            return Err(Error::arg("probe parameter shapes disagree with vocabulary"));
        }
        if !weight.all_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::arg("probe parameters must be finite"));
        }
        Ok(Self {
            weight,
            bias,
            vocab,
            slots,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    fn check_input(&self, features: &Matrix<T>) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::arg(format!(
                "probe expects {}-dimensional input, got {}",
                self.input_dim(),
                features.cols()
            )));
        }
        Ok(())
    }

    /// `(T · slots) × V` logits.
    pub fn forward(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(features)?;
        let mut out = features.matmul(&self.weight)?;
        out.add_row_broadcast(&self.bias);
        Matrix::from_vec(features.rows() * self.slots, self.vocab.size(), out.into_vec())
    }

    /// Returns parameter gradients and `∂loss/∂features`.
    pub(crate) fn backward(&self, features: &Matrix<T>, grad_logits: &Matrix<T>) -> Result<(ProbeGrads<T>, Matrix<T>)> {
        let g = Matrix::from_vec(features.rows(), self.weight.cols(), grad_logits.as_slice().to_vec())?;
        let weight = features.t_matmul(&g)?;
        let bias = g.column_sums();
        let input = g.matmul_t(&self.weight)?;
        Ok((ProbeGrads { weight, bias }, input))
    }

    pub(crate) fn apply(&mut self, grads: &ProbeGrads<T>, opt: &mut (Adam<T>, Adam<T>), lr: f64, cfg: &TrainConfig) {
        opt.0.update(self.weight.as_mut_slice(), grads.weight.as_slice(), lr, cfg);
        opt.1.update(&mut self.bias, &grads.bias, lr, cfg);
    }

    pub(crate) fn optimizer(&self) -> (Adam<T>, Adam<T>) {
        (Adam::new(self.weight.as_slice().len()), Adam::new(self.bias.len()))
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Greedy transcription of one feature sequence.
    pub fn transcribe(&self, features: &Matrix<T>) -> Result<String> {
        Ok(self.vocab.decode(&greedy_decode(&self.forward(features)?)))
    }

    /// Text form: `dsu-probe v1 D V`, optional `slots S`, D rows of W, the
    /// bias row, then `vocab` followed by the symbols' code points.
    pub fn to_text(&self) -> String {
        let mut s = format!("dsu-probe v1 {} {}\n", self.input_dim(), self.vocab.size());
        if self.slots != 1 {
            let _ = writeln!(s, "slots {}", self.slots);
        }
        for row in self.weight.iter_rows() {
            write_row(&mut s, row);
        }
        write_row(&mut s, &self.bias);
        s.push_str("vocab");
        for c in self.vocab.symbols() {
            let _ = write!(s, " {}", *c as u32);
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let (model, _) = Self::parse_block(&mut lines)?;
        Ok(model)
    }

    /// Parses one probe block and returns the first line after it.
    pub(crate) fn parse_block<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<(Self, Option<&'a str>)> {
        let header = lines.next().ok_or_else(|| Error::format("empty probe file"))?;
        let dims: Vec<usize> = header
            .strip_prefix("dsu-probe v1 ")
            .ok_or_else(|| Error::format(format!("bad probe header `{header}`")))?
            .split_ascii_whitespace()
            .map(|t| t.parse().map_err(|_| Error::format(format!("bad probe header `{header}`"))))
            .collect::<Result<_>>()?;
        let [d, v] = dims[..] else {
            return Err(Error::format(format!("bad probe header `{header}`")));
        };
        let mut next = lines.next().ok_or_else(|| Error::format("probe file truncated"))?;
        let mut slots = 1;
        if let Some(s) = next.strip_prefix("slots ") {
            slots = s.trim().parse().map_err(|_| Error::format("bad slots line"))?;
            next = lines.next().ok_or_else(|| Error::format("probe file truncated"))?;
        }
        let cols = slots * v;
        let mut data = Vec::with_capacity(d * cols);
        for r in 0..d {
            let line = if r == 0 {
                next
            } else {
                lines.next().ok_or_else(|| Error::format("probe file truncated"))?
            };
            data.extend(parse_row::<T>(line, cols)?);
        }
        let bias_line = if d == 0 { next } else { lines.next().ok_or_else(|| Error::format("probe file truncated"))? };
        let bias = parse_row::<T>(bias_line, cols)?;
        let vocab_line = lines.next().ok_or_else(|| Error::format("probe file missing vocab line"))?;
        let symbols = vocab_line
            .strip_prefix("vocab")
            .ok_or_else(|| Error::format("expected vocab line"))?
            .split_ascii_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::format(format!("bad vocab code point `{t}`")))
            })
            .collect::<Result<Vec<char>>>()?;
        let vocab = LabelVocab::new(symbols)?;
        if vocab.size() != v {
            return Err(Error::format("vocab line disagrees with header"));
        }
        let model = Self::from_parts(Matrix::from_vec(d, cols, data)?, bias, vocab, slots)?;
        Ok((model, lines.next()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

pub(crate) fn write_row<T: Scalar>(s: &mut String, row: &[T]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s.push('\n');
}

pub(crate) fn parse_row<T: Scalar>(line: &str, expected: usize) -> Result<Vec<T>> {
    let row = line
        .split_ascii_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| Error::format(format!("bad number `{t}`"))))
        .collect::<Result<Vec<T>>>()?;
    if row.len() != expected {
        return Err(Error::format(format!("expected {expected} values, found {}", row.len())));
    }
    Ok(row)
}

/// Length-sorted chunks of item indices; each epoch visits them in a
/// seeded random order.
pub(crate) fn length_sorted_batches(items: &[(usize, &str)], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].0.cmp(&items[b].0).then_with(|| items[a].1.cmp(items[b].1)));
    order
        .chunks(batch_size)
        .map(|c| {
            let mut batch = c.to_vec();
            // Reductions run in utterance-id order.
            batch.sort_by(|&a, &b| items[a].1.cmp(items[b].1));
            batch
        })
        .collect()
}

pub(crate) fn shuffled<R: Rng>(batches: &[Vec<usize>], rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.shuffle(rng);
    order
}

/// Everything Stage 1 produces.
#[derive(Debug, Clone)]
pub struct Stage1Output<T> {
    pub weights: LayerWeights<T>,
    pub model: ProbeModel<T>,
    /// Mean CTC loss per epoch.
    pub loss_history: Vec<f64>,
    /// Utterance-epochs skipped because their target was CTC-infeasible.
    pub skipped: usize,
}

struct Sample<T> {
    id: String,
    layers: Vec<Matrix<T>>,
    target: Vec<usize>,
}

fn stage1_samples<T: Scalar>(archive: &FeatureArchive, transcripts: &Transcripts, vocab: &LabelVocab) -> Result<Vec<Sample<T>>> {
    archive
        .utterances()
        .iter()
        .map(|u| {
            let text = transcripts
                .get(u.id())
                .ok_or_else(|| Error::arg(format!("no transcript for `{}`", u.id())))?;
            Ok(Sample {
                id: u.id().to_string(),
                layers: u.layer_matrices(),
                target: vocab.encode(text)?,
            })
        })
        .collect()
}

/// Learn λ and a linear CTC probe on continuous weighted-sum features.
pub fn train_stage1<T: Scalar>(
    archive: &FeatureArchive,
    transcripts: &Transcripts,
    mode: AggregationMode,
    config: &TrainConfig,
) -> Result<Stage1Output<T>> {
    config.validate()?;
    if archive.is_empty() {
        return Err(Error::arg("training archive is empty"));
    }
    let texts: Vec<&str> = archive
        .utterances()
        .iter()
        .filter_map(|u| transcripts.get(u.id()).map(String::as_str))
        .collect();
    let vocab = LabelVocab::from_transcripts(texts);
    if vocab.symbols().is_empty() {
        return Err(Error::arg("training transcripts contain no characters"));
    }
    let samples: Vec<Sample<T>> = stage1_samples(archive, transcripts, &vocab)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut weights = LayerWeights::uniform(mode, archive.num_layers())?;
    let mut model = ProbeModel::init(archive.feature_dim(), vocab, 1, &mut init_rng)?;
    let mut probe_opt = model.optimizer();
    let mut lambda_opt = Adam::new(weights.lambdas().len());

    let keys: Vec<(usize, &str)> = samples.iter().map(|s| (s.layers[0].rows(), s.id.as_str())).collect();
    let batches = length_sorted_batches(&keys, config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);
    let mut skipped = 0;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for b in shuffled(&batches, &mut shuffle_rng) {
            let results: Vec<Result<Option<(f64, ProbeGrads<T>, Vec<T>)>>> = batches[b]
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let feats = weighted_sum(&s.layers, &weights)?;
                    let logits = model.forward(&feats)?;
                    let (loss, g) = match ctc_loss_and_grad(&logits, &s.target) {
                        Ok(v) => v,
                        Err(Error::Infeasible { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    let (pg, dfeat) = model.backward(&feats, &g)?;
                    let dl = weighted_sum_grad(&s.layers, &weights, &dfeat)?;
                    Ok(Some((loss.as_f64(), pg, dl)))
                })
                .collect();

            let mut total: Option<(ProbeGrads<T>, Vec<T>)> = None;
            let mut n = 0usize;
            for r in results {
                let Some((loss, pg, dl)) = r? else {
                    skipped += 1;
                    continue;
                };
                epoch_loss += loss;
                n += 1;
                match &mut total {
                    None => total = Some((pg, dl)),
                    Some((acc, accl)) => {
                        acc.weight.add_assign(&pg.weight);
                        acc.bias.iter_mut().zip(&pg.bias).for_each(|(a, &g)| *a += g);
                        accl.iter_mut().zip(&dl).for_each(|(a, &g)| *a += g);
                    }
                }
            }
            let Some((mut pg, mut dl)) = total else {
                return Err(Error::Training(format!(
                    "epoch {epoch}: every utterance in a batch is CTC-infeasible"
                )));
            };
            epoch_count += n;
            let inv = T::one() / T::of_usize(n);
            pg.weight.scale(inv);
            pg.bias.iter_mut().for_each(|g| *g *= inv);
            dl.iter_mut().for_each(|g| *g *= inv);

            model.apply(&pg, &mut probe_opt, config.learning_rate, config);
            lambda_opt.update(weights.lambdas_mut(), &dl, config.lambda_learning_rate, config);
            if !model.is_finite() || weights.lambdas().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
            }
        }
        history.push(epoch_loss / epoch_count.max(1) as f64);
    }

    Ok(Stage1Output {
        weights,
        model,
        loss_history: history,
        skipped,
    })
}

/// Greedy hypotheses for every utterance of `archive`, keyed by id.
pub fn transcribe_continuous<T: Scalar>(
    weights: &LayerWeights<T>,
    model: &ProbeModel<T>,
    archive: &FeatureArchive,
) -> Result<BTreeMap<String, String>> {
    if weights.num_layers() != archive.num_layers() {
        return Err(Error::arg(format!(
            "weights cover {} layers, archive has {}",
            weights.num_layers(),
            archive.num_layers()
        )));
    }
    if model.input_dim() != archive.feature_dim() {
        return Err(Error::arg("probe input dimension differs from archive feature dimension"));
    }
    archive
        .utterances()
        .par_iter()
        .map(|u| {
            let feats = weighted_sum(&u.layer_matrices::<T>(), weights)?;
            Ok((u.id().to_string(), model.transcribe(&feats)?))
        })
        .collect()
}

pub(crate) fn eval_pairs(
    hyps: &BTreeMap<String, String>,
    transcripts: &Transcripts,
    vocab: &LabelVocab,
) -> Result<Vec<EvalPair>> {
    if hyps.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    hyps.iter()
        .map(|(id, hyp)| {
            let reference = transcripts
                .get(id)
                .ok_or_else(|| Error::arg(format!("no reference transcript for `{id}`")))?;
            if let Some(c) = reference.chars().find(|c| !vocab.symbols().contains(c)) {
                return Err(Error::arg(format!(
                    "reference for `{id}` has {c:?}, which the model vocabulary lacks"
                )));
            }
            Ok(EvalPair::new(id.clone(), reference.clone(), hyp.clone()))
        })
        .collect()
}

/// Corpus CER (percent) of the continuous probe on `archive`.
pub fn evaluate_continuous<T: Scalar>(
    weights: &LayerWeights<T>,
    model: &ProbeModel<T>,
    archive: &FeatureArchive,
    transcripts: &Transcripts,
) -> Result<f64> {
    let hyps = transcribe_continuous(weights, model, archive)?;
    corpus_cer(&eval_pairs(&hyps, transcripts, model.vocab())?)
}
