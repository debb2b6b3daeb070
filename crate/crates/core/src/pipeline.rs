//! End-to-end orchestration of both stages, plus the layer-weight CSV.
//!
//! Stage order: ingest (archive or synthetic corpus) → train/test split →
//! Stage 1 (learn λ, continuous CER) → freeze λ to disk → Stage 2 (reload λ,
//! aggregate, k-means, tokenize, dedup/BPE, discrete probes) → report.
//! Every intermediate artifact is written to the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::aggregator::{weighted_sum, AggregationMode, LayerWeights};
use crate::discrete_probe::{evaluate_discrete, gap_report, train_discrete, DiscreteConfig};
use crate::error::{Error, Result};
use crate::feature_store::{synth_generate, FeatureArchive, SynthSpec, SYNTH_FRAME_SECONDS};
use crate::matrix::Matrix;
use crate::probe::{evaluate_continuous, train_stage1, TrainConfig};
use crate::quantizer::{assign, kmeans_train, Codebook, KmeansConfig, DEFAULT_K};
use crate::sidecar;
use crate::tokenproc::{bpe_encode, bpe_train, corpus_bitrate, dedup, BpeModel, UnitSequence, DEFAULT_BPE_MERGES};

/// Compute precision used by the pipeline.
type F = f64;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Feature archive; when absent a synthetic corpus is generated from `synth`.
    pub archive: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    /// `utt_id<TAB>seconds`; defaults to 20 ms per frame.
    pub durations: Option<PathBuf>,
    /// Explicit split files (one utterance id per line).
    pub train_split: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
    pub synth: SynthSpec,
    pub out_dir: PathBuf,
    pub mode: AggregationMode,
    pub kmeans: KmeansConfig,
    pub bpe_merges: usize,
    pub dedup: bool,
    pub stage1: TrainConfig,
    pub discrete: DiscreteConfig,
    pub frame_seconds: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            archive: None,
            transcripts: None,
            durations: None,
            train_split: None,
            test_split: None,
            synth: SynthSpec {
                num_utts: 250,
                lexicon_size: 12,
                ..SynthSpec::default()
            },
            out_dir: PathBuf::from("dsu-run"),
            mode: AggregationMode::Finetuned,
            kmeans: KmeansConfig {
                k: DEFAULT_K,
                ..KmeansConfig::default()
            },
            bpe_merges: DEFAULT_BPE_MERGES,
            dedup: true,
            stage1: TrainConfig::default(),
            discrete: DiscreteConfig::default(),
            frame_seconds: SYNTH_FRAME_SECONDS,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::arg(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::arg(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl PipelineConfig {
    /// Parse flat `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("config line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "archive" => self.archive = path(),
            "transcripts" => self.transcripts = path(),
            "durations" => self.durations = path(),
            "train_split" => self.train_split = path(),
            "test_split" => self.test_split = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.kmeans.k = parse(key, value)?,
            "kmeans.max_iters" => self.kmeans.max_iters = parse(key, value)?,
            "kmeans.tolerance" => self.kmeans.tolerance = parse(key, value)?,
            "kmeans.sample_cap" => {
                self.kmeans.sample_cap = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "bpe_merges" => self.bpe_merges = parse(key, value)?,
            "dedup" => self.dedup = parse_bool(key, value)?,
            "frame_seconds" => self.frame_seconds = parse(key, value)?,
            "stage1.lr" => self.stage1.learning_rate = parse(key, value)?,
            "stage1.lambda_lr" => self.stage1.lambda_learning_rate = parse(key, value)?,
            "stage1.epochs" => self.stage1.epochs = parse(key, value)?,
            "stage1.batch_size" => self.stage1.batch_size = parse(key, value)?,
            "discrete.lr" => self.discrete.train.learning_rate = parse(key, value)?,
            "discrete.epochs" => self.discrete.train.epochs = parse(key, value)?,
            "discrete.batch_size" => self.discrete.train.batch_size = parse(key, value)?,
            "discrete.embedding_dim" => self.discrete.embedding_dim = parse(key, value)?,
            "synth.classes" => self.synth.num_classes = parse(key, value)?,
            "synth.layers" => self.synth.num_layers = parse(key, value)?,
            "synth.planted" => self.synth.planted_layer = parse(key, value)?,
            "synth.dim" => self.synth.feature_dim = parse(key, value)?,
            "synth.noise" => self.synth.noise_sigma = parse(key, value)?,
            "synth.frames_per_symbol" => self.synth.frames_per_symbol = parse(key, value)?,
            "synth.utts" => self.synth.num_utts = parse(key, value)?,
            "synth.min_symbols" => self.synth.min_symbols = parse(key, value)?,
            "synth.max_symbols" => self.synth.max_symbols = parse(key, value)?,
            "synth.lexicon" => self.synth.lexicon_size = parse(key, value)?,
            _ => return Err(Error::arg(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Push the run seed into every seeded component.
    fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.kmeans.seed = self.seed;
        c.stage1.seed = self.seed;
        c.discrete.train.seed = self.seed;
        c
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("archive", &self.archive),
            ("transcripts", &self.transcripts),
            ("durations", &self.durations),
            ("train_split", &self.train_split),
            ("test_split", &self.test_split),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::arg(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        if self.archive.is_some() != self.transcripts.is_some() {
            return Err(Error::arg("archive and transcripts must be given together"));
        }
        if self.train_split.is_some() != self.test_split.is_some() {
            return Err(Error::arg("train_split and test_split must be given together"));
        }
        if !(self.frame_seconds > 0.0) {
            return Err(Error::arg("frame_seconds must be positive"));
        }
        Ok(())
    }
}

/// Test split membership: last byte of SHA-256(utt_id) divisible by 5.
pub fn is_test_utterance(utt_id: &str) -> bool {
    let digest = Sha256::digest(utt_id.as_bytes());
    digest[digest.len() - 1] % 5 == 0
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `layer_index,weight` rows of the softmax weights; the final-norm term of
/// pretrained mode is labelled `final_norm`.
pub fn weight_csv<T: crate::scalar::Scalar>(weights: &LayerWeights<T>) -> String {
    let mut s = String::from("layer_index,weight\n");
    for (i, w) in weights.weights().iter().enumerate() {
        if i == weights.num_layers() {
            let _ = writeln!(s, "final_norm,{w}");
        } else {
            let _ = writeln!(s, "{},{w}", i + 1);
        }
    }
    s
}

pub fn export_weight_csv<T: crate::scalar::Scalar>(weights: &LayerWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weight_csv(weights))?;
    Ok(())
}

/// Aggregate each utterance of `archive` with frozen weights.
pub fn aggregate_archive(archive: &FeatureArchive, weights: &LayerWeights<F>) -> Result<Vec<(String, Matrix<F>)>> {
    archive
        .utterances()
        .iter()
        .map(|u| Ok((u.id().to_string(), weighted_sum(&u.layer_matrices::<F>(), weights)?)))
        .collect()
}

/// Stack frames of many sequences into one matrix.
pub fn stack_frames(seqs: &[(String, Matrix<F>)]) -> Result<Matrix<F>> {
    let dim = seqs.first().map_or(0, |(_, m)| m.cols());
    let rows: usize = seqs.iter().map(|(_, m)| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * dim);
    for (_, m) in seqs {
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(rows, dim, data)
}

/// Unit stream of every aggregated utterance.
pub fn tokenize(seqs: &[(String, Matrix<F>)], codebook: &Codebook<F>) -> Result<Vec<UnitSequence>> {
    seqs.iter()
        .map(|(id, m)| Ok(UnitSequence::new(id.clone(), assign(m, codebook)?)))
        .collect()
}

/// Results for one discrete token variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub name: String,
    pub vocab_size: usize,
    pub slots: usize,
    pub tokens: usize,
    pub bitrate: f64,
    pub cer: f64,
    pub skipped: usize,
    pub gap_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: AggregationMode,
    pub seed: u64,
    pub num_layers: usize,
    pub feature_dim: usize,
    pub train_utts: usize,
    pub test_utts: usize,
    pub total_frames: usize,
    pub total_seconds: f64,
    pub stage1_final_loss: f64,
    pub layer_weights: Vec<f64>,
    /// 1-based index of the largest weight (`num_layers + 1` is the final norm).
    pub top_layer: usize,
    pub weights_sha256_before: String,
    pub weights_sha256_after: String,
    pub continuous_cer: f64,
    pub kmeans_k: usize,
    pub kmeans_distortion: f64,
    pub bpe_merges_learned: usize,
    pub variants: Vec<VariantReport>,
    /// Token count of the most processed variant.
    pub discrete_tokens: usize,
    pub stage_seconds: Vec<(String, f64)>,
}

impl RunReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Machine-readable `key=value` lines. Wall-clock times are excluded so
    /// that the file is a pure function of config and seed.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("mode", self.mode.to_string());
        kv("seed", self.seed.to_string());
        kv("num_layers", self.num_layers.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("train_utts", self.train_utts.to_string());
        kv("test_utts", self.test_utts.to_string());
        kv("total_frames", self.total_frames.to_string());
        kv("total_seconds", self.total_seconds.to_string());
        kv("stage1_final_loss", self.stage1_final_loss.to_string());
        let w: Vec<String> = self.layer_weights.iter().map(f64::to_string).collect();
        kv("layer_weights", w.join(" "));
        kv("top_layer", self.top_layer.to_string());
        kv("weights_sha256_before", self.weights_sha256_before.clone());
        kv("weights_sha256_after", self.weights_sha256_after.clone());
        kv("continuous_cer", self.continuous_cer.to_string());
        kv("kmeans_k", self.kmeans_k.to_string());
        kv("kmeans_distortion", self.kmeans_distortion.to_string());
        kv("bpe_merges_learned", self.bpe_merges_learned.to_string());
        for v in &self.variants {
            let n = &v.name;
            kv(&format!("{n}.vocab_size"), v.vocab_size.to_string());
            kv(&format!("{n}.slots"), v.slots.to_string());
            kv(&format!("{n}.tokens"), v.tokens.to_string());
            kv(&format!("{n}.bitrate"), v.bitrate.to_string());
            kv(&format!("{n}.cer"), v.cer.to_string());
            kv(&format!("{n}.skipped"), v.skipped.to_string());
            kv(
                &format!("{n}.gap_percent"),
                v.gap_percent.map_or("undefined".into(), |g| g.to_string()),
            );
        }
        kv("discrete_tokens", self.discrete_tokens.to_string());
        s
    }

    pub fn to_human(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode {} | L={} D={} | train {} / test {} utts", self.mode, self.num_layers, self.feature_dim, self.train_utts, self.test_utts);
        let _ = writeln!(s, "layer weights: {}", self.layer_weights.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(" "));
        let _ = writeln!(s, "top layer: {}", self.top_layer);
        let _ = writeln!(s, "frozen weights sha256: {} -> {}", self.weights_sha256_before, self.weights_sha256_after);
        let _ = writeln!(s, "continuous CER: {:.2}%", self.continuous_cer);
        let _ = writeln!(s, "k-means K={} distortion {:.4}", self.kmeans_k, self.kmeans_distortion);
        let _ = writeln!(s, "{:<10} {:>7} {:>8} {:>10} {:>8} {:>8} {:>9}", "variant", "vocab", "tokens", "bits/s", "CER%", "skipped", "gap%");
        for v in &self.variants {
            let gap = v.gap_percent.map_or("n/a".to_string(), |g| format!("{g:.1}"));
            let _ = writeln!(s, "{:<10} {:>7} {:>8} {:>10.1} {:>8.2} {:>8} {:>9}", v.name, v.vocab_size, v.tokens, v.bitrate, v.cer, v.skipped, gap);
        }
        for (stage, secs) in &self.stage_seconds {
            let _ = writeln!(s, "stage {stage}: {secs:.2}s");
        }
        s
    }
}

struct Timer {
    stages: Vec<(String, f64)>,
}

impl Timer {
    fn run<R>(&mut self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name))?;
        self.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }
}

fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Run both stages and write every artifact under `config.out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let cfg = config.seeded();
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    let mut timer = Timer { stages: Vec::new() };

    let (archive, transcripts, durations) = timer.run("ingest", || {
        let (archive, transcripts, durations) = match (&cfg.archive, &cfg.transcripts) {
            (Some(a), Some(t)) => (FeatureArchive::load(a)?, sidecar::read_transcripts(t)?, None),
            _ => {
                let corpus = synth_generate(&cfg.synth)?;
                corpus.archive.save(out.join("features.dsua"))?;
                sidecar::write_transcripts(out.join("transcripts.tsv"), &corpus.transcripts)?;
                sidecar::write_durations(out.join("durations.tsv"), &corpus.durations)?;
                (corpus.archive, corpus.transcripts, Some(corpus.durations))
            }
        };
        let durations = match (&cfg.durations, durations) {
            (Some(p), _) => sidecar::read_durations(p)?,
            (None, Some(d)) => d,
            (None, None) => archive
                .utterances()
                .iter()
                .map(|u| (u.id().to_string(), u.num_frames() as f64 * cfg.frame_seconds))
                .collect(),
        };
        Ok((archive, transcripts, durations))
    })?;

    let (train, test) = timer.run("split", || {
        let (train, test) = match (&cfg.train_split, &cfg.test_split) {
            (Some(tr), Some(te)) => {
                let (tr, te) = (read_id_list(tr)?, read_id_list(te)?);
                (archive.filter(|u| tr.contains(u.id())), archive.filter(|u| te.contains(u.id())))
            }
            _ => (
                archive.filter(|u| !is_test_utterance(u.id())),
                archive.filter(|u| is_test_utterance(u.id())),
            ),
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::arg(format!(
                "split produced {} train and {} test utterances",
                train.len(),
                test.len()
            )));
        }
        Ok((train, test))
    })?;

    let weights_path = out.join("weights.txt");
    let (stage1_loss, continuous_cer, hash_before) = timer.run("stage1", || {
        let s1 = train_stage1::<F>(&train, &transcripts, cfg.mode, &cfg.stage1)?;
        fs::write(&weights_path, s1.weights.to_text())?;
        s1.model.save(out.join("stage1_probe.txt"))?;
        export_weight_csv(&s1.weights, out.join("weights.csv"))?;
        let cer = evaluate_continuous(&s1.weights, &s1.model, &test, &transcripts)?;
        let hash = sha256_hex(&fs::read(&weights_path)?);
        Ok((s1.loss_history.last().copied().unwrap_or(f64::NAN), cer, hash))
    })?;

    let (weights, train_feats, test_feats) = timer.run("extract", || {
        // Stage 2 only ever sees the frozen file.
        let weights = LayerWeights::<F>::from_text(&fs::read_to_string(&weights_path)?)?;
        Ok((weights.clone(), aggregate_archive(&train, &weights)?, aggregate_archive(&test, &weights)?))
    })?;

    let (codebook, kmeans_distortion) = timer.run("kmeans", || {
        let frames = stack_frames(&train_feats)?;
        let (codebook, history) = kmeans_train(&frames, &cfg.kmeans)?;
        codebook.save(out.join("codebook.dsuk"))?;
        let distortion = history.last().map_or(f64::NAN, |d| *d);
        Ok((Codebook::<F>::load(out.join("codebook.dsuk"))?, distortion))
    })?;

    let (raw_train, raw_test) = timer.run("tokenize", || {
        let raw_train = tokenize(&train_feats, &codebook)?;
        let raw_test = tokenize(&test_feats, &codebook)?;
        let mut all = raw_train.clone();
        all.extend(raw_test.iter().cloned());
        all.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        sidecar::write_units(out.join("units.tsv"), &all)?;
        Ok((raw_train, raw_test))
    })?;

    let k = codebook.k();
    let mut variants = vec![Variant {
        name: "raw".into(),
        train: raw_train.clone(),
        test: raw_test.clone(),
        vocab: k,
        slots: 1,
    }];
    let mut merges_learned = 0;
    timer.run("postprocess", || {
        let (base_train, base_test, base_name) = if cfg.dedup {
            let tr: Vec<UnitSequence> = raw_train.iter().map(dedup).collect();
            let te: Vec<UnitSequence> = raw_test.iter().map(dedup).collect();
            write_variant_units(&out, "dedup", &tr, &te)?;
            variants.push(Variant {
                name: "dedup".into(),
                train: tr.clone(),
                test: te.clone(),
                vocab: k,
                slots: 1,
            });
            (tr, te, "dedup")
        } else {
            (raw_train.clone(), raw_test.clone(), "raw")
        };
        if cfg.bpe_merges > 0 {
            let model = bpe_train(&base_train, k as u32, cfg.bpe_merges)?;
            model.save(out.join("bpe.model"))?;
            merges_learned = model.merges().len();
            let encode = |seqs: &[UnitSequence]| -> Result<Vec<UnitSequence>> {
                seqs.iter()
                    .map(|s| Ok(UnitSequence::new(s.utt_id.clone(), bpe_encode(&s.units, &model)?)))
                    .collect()
            };
            let (tr, te) = (encode(&base_train)?, encode(&base_test)?);
            let name = format!("{base_name}_bpe");
            write_variant_units(&out, &name, &tr, &te)?;
            variants.push(Variant {
                name,
                train: tr,
                test: te,
                vocab: model.vocab_size() as usize,
                slots: max_token_length(&model),
            });
        }
        Ok(())
    })?;

    let total_seconds: f64 = archive
        .utterances()
        .iter()
        .map(|u| {
            durations
                .get(u.id())
                .copied()
                .ok_or_else(|| Error::arg(format!("no duration for `{}`", u.id())))
        })
        .sum::<Result<f64>>()?;

    let mut reports = Vec::new();
    for Variant { name, train: tr, test: te, vocab, slots } in &variants {
        let report = timer.run(&format!("discrete_{name}"), || {
            let dcfg = DiscreteConfig {
                slots: *slots,
                ..cfg.discrete.clone()
            };
            let trained = train_discrete::<F>(tr, &transcripts, *vocab, &dcfg)?;
            trained.model.save(out.join(format!("discrete_{name}.txt")))?;
            let eval = evaluate_discrete(&trained.model, te, &transcripts)?;
            let mut all = tr.clone();
            all.extend(te.iter().cloned());
            let tokens = all.iter().map(|s| s.units.len()).sum();
            Ok(VariantReport {
                name: name.clone(),
                vocab_size: *vocab,
                slots: *slots,
                tokens,
                bitrate: corpus_bitrate(&all, (*vocab).max(2) as u32, total_seconds)?,
                cer: eval.cer,
                skipped: eval.skipped,
                gap_percent: gap_report(continuous_cer, eval.cer).ok(),
            })
        })?;
        reports.push(report);
    }

    let hash_after = sha256_hex(&fs::read(&weights_path)?);
    if hash_after != hash_before {
        return Err(Error::Training("frozen weight file changed during stage 2".into()).in_stage("freeze"));
    }

    let layer_weights = weights.weights();
    let top_layer = crate::scalar::argmax(&layer_weights).map_or(0, |i| i + 1);
    let report = RunReport {
        mode: cfg.mode,
        seed: cfg.seed,
        num_layers: archive.num_layers(),
        feature_dim: archive.feature_dim(),
        train_utts: train.len(),
        test_utts: test.len(),
        total_frames: archive.total_frames(),
        total_seconds,
        stage1_final_loss: stage1_loss,
        layer_weights,
        top_layer,
        weights_sha256_before: hash_before,
        weights_sha256_after: hash_after,
        continuous_cer,
        kmeans_k: k,
        kmeans_distortion,
        bpe_merges_learned: merges_learned,
        discrete_tokens: reports.last().map_or(0, |v| v.tokens),
        variants: reports,
        stage_seconds: timer.stages,
    };
    fs::write(out.join("report.txt"), report.to_key_values())?;
    fs::write(out.join("summary.txt"), report.to_human())?;
    Ok(report)
}

struct Variant {
    name: String,
    train: Vec<UnitSequence>,
    test: Vec<UnitSequence>,
    vocab: usize,
    /// Output frames per token: the longest unit expansion of any token.
    slots: usize,
}

fn max_token_length(model: &BpeModel) -> usize {
    model.token_lengths().into_iter().max().unwrap_or(1)
}

fn write_variant_units(out: &Path, name: &str, train: &[UnitSequence], test: &[UnitSequence]) -> Result<()> {
    let mut all: BTreeMap<&str, &UnitSequence> = BTreeMap::new();
    for s in train.iter().chain(test) {
        all.insert(&s.utt_id, s);
    }
    let seqs: Vec<UnitSequence> = all.into_values().cloned().collect();
    sidecar::write_units(out.join(format!("units_{name}.tsv")), &seqs)
}
