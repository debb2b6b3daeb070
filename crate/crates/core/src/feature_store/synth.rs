//! Synthetic corpus with one planted informative layer.
//!
//! Every utterance is a symbol sequence. Each symbol occupies
//! `frames_per_symbol` consecutive frames. On the planted layer a frame is
//! the class mean plus `N(0, noise_sigma²)` noise; every other layer is pure
//! `N(0, 1)` noise. Adjacent symbols always differ, so both the per-frame
//! class sequence and the transcript are recoverable with CTC.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureArchive, Utterance};
use crate::error::{Error, Result};
use crate::sidecar::Transcripts;

/// Minimum pairwise class-mean distance, in units of `noise_sigma`.
pub const CLASS_SEPARATION: f64 = 8.0;

/// Characters used to render class indices in transcripts.
pub const SYNTH_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Seconds of audio represented by one synthetic frame (50 Hz frame rate).
pub const SYNTH_FRAME_SECONDS: f64 = 0.02;

pub fn symbol_char(class: usize) -> char {
    SYNTH_ALPHABET.chars().nth(class).expect("class index within alphabet")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_layers: usize,
    pub feature_dim: usize,
    /// 1-based index of the informative layer.
    pub planted_layer: usize,
    pub frames_per_symbol: usize,
    pub noise_sigma: f64,
    pub num_utts: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// When non-zero, utterances are concatenations of words from a random
    /// lexicon of this many entries instead of i.i.d. symbols.
    pub lexicon_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_layers: 4,
            feature_dim: 16,
            planted_layer: 2,
            frames_per_symbol: 3,
            noise_sigma: 0.1,
            num_utts: 200,
            min_symbols: 6,
            max_symbols: 12,
            lexicon_size: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(format!("synth spec: {m}")));
        if self.num_classes == 0 || self.num_classes > SYNTH_ALPHABET.len() {
            return bad(&format!("num_classes must be in 1..={}", SYNTH_ALPHABET.len()));
        }
        if self.num_layers == 0 || self.feature_dim == 0 {
            return bad("num_layers and feature_dim must be positive");
        }
        if self.planted_layer == 0 || self.planted_layer > self.num_layers {
            return bad("planted_layer must be in [1, num_layers]");
        }
        if self.frames_per_symbol == 0 {
            return bad("frames_per_symbol must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return bad("need 1 <= min_symbols <= max_symbols");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub archive: FeatureArchive,
    pub transcripts: Transcripts,
    /// Symbol (class index) sequence per utterance, in archive order.
    pub symbols: Vec<Vec<usize>>,
    /// Per-class mean vectors on the planted layer.
    pub class_means: Vec<Vec<f64>>,
    pub durations: BTreeMap<String, f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn class_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    loop {
        let mut means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| (0..spec.feature_dim).map(|_| normal(rng)).collect())
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                min = min.min(dist(&means[i], &means[j]));
            }
        }
        if min == 0.0 {
            continue;
        }
        let needed = CLASS_SEPARATION * spec.noise_sigma;
        if min.is_finite() && min < needed {
            let s = needed / min;
            means.iter_mut().flatten().for_each(|v| *v *= s);
        }
        return means;
    }
}

fn draw_symbol(rng: &mut ChaCha8Rng, classes: usize, prev: Option<usize>) -> usize {
    match prev {
        Some(p) if classes > 1 => {
            let s = rng.random_range(0..classes - 1);
            if s >= p {
                s + 1
            } else {
                s
            }
        }
        _ => rng.random_range(0..classes),
    }
}

fn make_lexicon(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..spec.lexicon_size)
        .map(|_| {
            let len = rng.random_range(2..=4);
            let mut word: Vec<usize> = Vec::with_capacity(len);
            for _ in 0..len {
                let prev = word.last().copied();
                word.push(draw_symbol(rng, spec.num_classes, prev));
            }
            word
        })
        .collect()
}

fn draw_sequence(spec: &SynthSpec, lexicon: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.min_symbols..=spec.max_symbols);
    let mut seq: Vec<usize> = Vec::with_capacity(len + 4);
    while seq.len() < len {
        let prev = seq.last().copied();
        if !lexicon.is_empty() {
            let word = &lexicon[rng.random_range(0..lexicon.len())];
            if spec.num_classes == 1 || prev != Some(word[0]) {
                seq.extend_from_slice(word);
                continue;
            }
        }
        seq.push(draw_symbol(rng, spec.num_classes, prev));
    }
    seq.truncate(len);
    seq
}

/// Generate a corpus deterministically from `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let lexicon = make_lexicon(spec, &mut rng);
    let (l_count, dim, r) = (spec.num_layers, spec.feature_dim, spec.frames_per_symbol);
    let planted = spec.planted_layer - 1;

    let mut archive = FeatureArchive::new(l_count, dim)?;
    let mut transcripts = Transcripts::new();
    let mut durations = BTreeMap::new();
    let mut symbols = Vec::with_capacity(spec.num_utts);
    let width = spec.num_utts.max(1).to_string().len().max(5);
    for n in 0..spec.num_utts {
        let id = format!("utt{n:0width$}");
        let seq = draw_sequence(spec, &lexicon, &mut rng);
        let frames = seq.len() * r;
        let mut values = Vec::with_capacity(l_count * frames * dim);
        for layer in 0..l_count {
            for &class in &seq {
                for _ in 0..r {
                    if layer == planted {
                        for &m in &means[class] {
                            let noise = if spec.noise_sigma > 0.0 {
                                spec.noise_sigma * normal(&mut rng)
                            } else {
                                0.0
                            };
                            values.push((m + noise) as f32);
                        }
                    } else {
                        values.extend((0..dim).map(|_| normal(&mut rng) as f32));
                    }
                }
            }
        }
        archive.push(Utterance::new(id.clone(), l_count, frames, dim, values)?)?;
        transcripts.insert(id.clone(), seq.iter().map(|&c| symbol_char(c)).collect());
        durations.insert(id, frames as f64 * SYNTH_FRAME_SECONDS);
        symbols.push(seq);
    }
    Ok(SynthCorpus {
        archive,
        transcripts,
        symbols,
        class_means: means,
        durations,
    })
}
