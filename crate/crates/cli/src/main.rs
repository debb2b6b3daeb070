use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsu_core::discrete_probe::{evaluate_discrete, train_discrete, DiscreteConfig, DiscreteProbeModel, DEFAULT_EMBEDDING_DIM};
use dsu_core::feature_store::{synth_generate, FeatureArchive, SynthSpec, Utterance};
use dsu_core::metrics::{corpus_cer, EvalPair};
use dsu_core::pipeline::{aggregate_archive, export_weight_csv, run_pipeline, stack_frames, tokenize, PipelineConfig};
use dsu_core::probe::{train_stage1, TrainConfig};
use dsu_core::quantizer::{kmeans_train, Codebook, KmeansConfig};
use dsu_core::sidecar;
use dsu_core::tokenproc::{bpe_encode, bpe_train, corpus_bitrate, dedup, BpeModel, UnitSequence, DEFAULT_BPE_MERGES};
use dsu_core::{AggregationMode, LayerWeightsF64, MatrixF64};

/// Discrete speech units: layer weighting, k-means tokenization and CTC probes.
#[derive(Parser)]
#[command(name = "dsu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-layer feature archive with a planted layer.
    GenSynth(GenSynth),
    /// Learn layer weights with a continuous CTC probe.
    TrainWeights(TrainWeights),
    /// Write the softmax layer weights as CSV.
    ExportWeights(ExportWeights),
    /// Collapse an archive to one layer using frozen weights.
    Aggregate(Aggregate),
    /// Train a k-means codebook.
    TrainKmeans(TrainKmeans),
    /// Map every frame to its nearest centroid.
    Tokenize(Tokenize),
    /// Collapse consecutive repeated units.
    Dedup(Dedup),
    /// Learn BPE merges over unit streams.
    BpeTrain(BpeTrain),
    /// Encode unit streams with a BPE model.
    BpeApply(BpeApply),
    /// Bits per second of a token corpus.
    Bitrate(Bitrate),
    /// Train a CTC probe over discrete tokens.
    TrainDiscrete(TrainDiscrete),
    /// Character error rate of a discrete probe.
    EvalCer(EvalCer),
    /// Character error rate between two transcript files.
    Cer(Cer),
    /// Run the whole two-stage pipeline.
    Run(Run),
}

#[derive(Args)]
struct TrainOpts {
    /// Adam learning rate for the probe.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn config(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// 1-based index of the informative layer.
    #[arg(long, default_value_t = 2)]
    planted: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    utts: usize,
    #[arg(long, default_value_t = 3)]
    frames_per_symbol: usize,
    #[arg(long, default_value_t = 6)]
    min_symbols: usize,
    #[arg(long, default_value_t = 12)]
    max_symbols: usize,
    /// Number of distinct words; 0 draws symbols independently.
    #[arg(long, default_value_t = 0)]
    lexicon: usize,
    /// Archive path; sidecars are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainWeights {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long, default_value = "finetuned")]
    mode: AggregationMode,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    /// Learning rate for the layer logits.
    #[arg(long)]
    lambda_lr: Option<f64>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct ExportWeights {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Aggregate {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainKmeans {
    /// Feature archive; multi-layer archives need --weights.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = dsu_core::quantizer::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Tokenize {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Dedup {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpeTrain {
    #[arg(long)]
    units: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BPE_MERGES)]
    merges: usize,
    /// Base unit vocabulary; defaults to one past the largest unit seen.
    #[arg(long)]
    vocab: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpeApply {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bitrate {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    duration_file: PathBuf,
    #[arg(long)]
    vocab: u32,
}

#[derive(Args)]
struct TrainDiscrete {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM)]
    embedding_dim: usize,
    /// Output frames emitted per token.
    #[arg(long, default_value_t = 1)]
    slots: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct EvalCer {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    transcripts: PathBuf,
    /// Write hypotheses as `utt_id<TAB>text`.
    #[arg(long)]
    hyp_out: Option<PathBuf>,
}

#[derive(Args)]
struct Cer {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct Run {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    merges: Option<usize>,
    #[arg(long)]
    dedup: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load_weights(path: &Path) -> Result<LayerWeightsF64> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LayerWeightsF64::from_text(&text)?)
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        num_layers: a.layers,
        feature_dim: a.dim,
        planted_layer: a.planted,
        frames_per_symbol: a.frames_per_symbol,
        noise_sigma: a.noise,
        num_utts: a.utts,
        min_symbols: a.min_symbols,
        max_symbols: a.max_symbols,
        lexicon_size: a.lexicon,
        seed: a.seed,
    };
    let corpus = synth_generate(&spec)?;
    corpus.archive.save(&a.out)?;
    let tr = sidecar_path(&a.out, ".transcripts.tsv");
    let du = sidecar_path(&a.out, ".durations.tsv");
    sidecar::write_transcripts(&tr, &corpus.transcripts)?;
    sidecar::write_durations(&du, &corpus.durations)?;
    println!(
        "wrote {} utterances ({} frames) to {}, {}, {}",
        corpus.archive.len(),
        corpus.archive.total_frames(),
        a.out.display(),
        tr.display(),
        du.display()
    );
    Ok(())
}

fn train_weights(a: TrainWeights) -> Result<()> {
    let archive = FeatureArchive::load(&a.archive)?;
    let transcripts = sidecar::read_transcripts(&a.transcripts)?;
    let mut cfg = a.train.config(TrainConfig::default());
    if let Some(lr) = a.lambda_lr {
        cfg.lambda_learning_rate = lr;
    }
    let out = train_stage1::<f64>(&archive, &transcripts, a.mode, &cfg)?;
    fs::write(&a.out_weights, out.weights.to_text())?;
    out.model.save(&a.out_model)?;
    for (epoch, loss) in out.loss_history.iter().enumerate() {
        println!("epoch {:>3} loss {loss:.6}", epoch + 1);
    }
    let w: Vec<String> = out.weights.weights().iter().map(|w| format!("{w:.4}")).collect();
    println!("weights {}", w.join(" "));
    if out.skipped > 0 {
        println!("skipped {} infeasible utterances", out.skipped);
    }
    Ok(())
}

fn aggregate(a: Aggregate) -> Result<()> {
    let archive = FeatureArchive::load(&a.archive)?;
    let weights = load_weights(&a.weights)?;
    let seqs = aggregate_archive(&archive, &weights)?;
    let mut out = FeatureArchive::new(1, archive.feature_dim())?;
    for (id, m) in seqs {
        let t = m.rows();
        let data = m.into_vec().into_iter().map(|v| v as f32).collect();
        out.push(Utterance::new(id, 1, t, archive.feature_dim(), data)?)?;
    }
    out.save(&a.out)?;
    println!("wrote {} aggregated utterances to {}", out.len(), a.out.display());
    Ok(())
}

fn features_for_kmeans(path: &Path, weights: Option<&Path>) -> Result<MatrixF64> {
    let archive = FeatureArchive::load(path)?;
    let seqs = match weights {
        Some(w) => aggregate_archive(&archive, &load_weights(w)?)?,
        None if archive.num_layers() == 1 => archive
            .utterances()
            .iter()
            .map(|u| (u.id().to_string(), u.layer_matrix::<f64>(0)))
            .collect(),
        None => bail!(
            "{} has {} layers; pass --weights or aggregate it first",
            path.display(),
            archive.num_layers()
        ),
    };
    Ok(stack_frames(&seqs)?)
}

fn train_kmeans(a: TrainKmeans) -> Result<()> {
    let frames = features_for_kmeans(&a.features, a.weights.as_deref())?;
    let cfg = KmeansConfig {
        k: a.k,
        max_iters: a.max_iters,
        tolerance: a.tolerance,
        seed: a.seed,
        sample_cap: a.sample_cap,
    };
    let (codebook, history) = kmeans_train(&frames, &cfg)?;
    codebook.save(&a.out)?;
    println!(
        "K={} D={} iterations={} distortion={}",
        codebook.k(),
        codebook.dim(),
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn tokenize_cmd(a: Tokenize) -> Result<()> {
    let archive = FeatureArchive::load(&a.archive)?;
    let weights = load_weights(&a.weights)?;
    let codebook = Codebook::<f64>::load(&a.codebook)?;
    let seqs = tokenize(&aggregate_archive(&archive, &weights)?, &codebook)?;
    sidecar::write_units(&a.out, &seqs)?;
    println!("tokenized {} utterances into {}", seqs.len(), a.out.display());
    Ok(())
}

fn bpe_train_cmd(a: BpeTrain) -> Result<()> {
    let corpus = sidecar::read_units(&a.units)?;
    let base = match a.vocab {
        Some(v) => v,
        None => corpus.iter().flat_map(|s| s.units.iter()).max().map_or(1, |m| m + 1),
    };
    let model = bpe_train(&corpus, base, a.merges)?;
    model.save(&a.out)?;
    println!("learned {} merges over base vocabulary {base}", model.merges().len());
    Ok(())
}

fn bpe_apply(a: BpeApply) -> Result<()> {
    let model = BpeModel::load(&a.model)?;
    let seqs = sidecar::read_units(&a.units)?
        .into_iter()
        .map(|s| Ok(UnitSequence::new(s.utt_id, bpe_encode(&s.units, &model)?)))
        .collect::<Result<Vec<_>>>()?;
    sidecar::write_units(&a.out, &seqs)?;
    Ok(())
}

fn bitrate_cmd(a: Bitrate) -> Result<()> {
    let seqs = sidecar::read_units(&a.units)?;
    let durations = sidecar::read_durations(&a.duration_file)?;
    let mut seconds = 0.0;
    for s in &seqs {
        seconds += durations
            .get(&s.utt_id)
            .with_context(|| format!("no duration for `{}`", s.utt_id))?;
    }
    let tokens: usize = seqs.iter().map(|s| s.units.len()).sum();
    println!("tokens={tokens} seconds={seconds}");
    println!("bitrate={} bits/s", corpus_bitrate(&seqs, a.vocab, seconds)?);
    Ok(())
}

fn train_discrete_cmd(a: TrainDiscrete) -> Result<()> {
    let corpus = sidecar::read_units(&a.units)?;
    let transcripts = sidecar::read_transcripts(&a.transcripts)?;
    let cfg = DiscreteConfig {
        train: a.train.config(DiscreteConfig::default().train),
        embedding_dim: a.embedding_dim,
        slots: a.slots,
    };
    let out = train_discrete::<f64>(&corpus, &transcripts, a.vocab, &cfg)?;
    out.model.save(&a.out)?;
    for (epoch, loss) in out.loss_history.iter().enumerate() {
        println!("epoch {:>3} loss {loss:.6}", epoch + 1);
    }
    if out.skipped > 0 {
        println!("skipped {} infeasible utterances", out.skipped);
    }
    Ok(())
}

fn eval_cer(a: EvalCer) -> Result<()> {
    let model = DiscreteProbeModel::<f64>::load(&a.model)?;
    let corpus = sidecar::read_units(&a.units)?;
    let transcripts = sidecar::read_transcripts(&a.transcripts)?;
    let eval = evaluate_discrete(&model, &corpus, &transcripts)?;
    if let Some(path) = &a.hyp_out {
        sidecar::write_transcripts(path, &eval.hypotheses)?;
    }
    println!("CER={}%", eval.cer);
    if eval.skipped > 0 {
        println!("infeasible={}", eval.skipped);
    }
    Ok(())
}

fn cer(a: Cer) -> Result<()> {
    let reference = sidecar::read_transcripts(&a.reference)?;
    let hyp = sidecar::read_transcripts(&a.hyp)?;
    let mut pairs = Vec::with_capacity(reference.len());
    for (id, r) in &reference {
        let h = hyp
            .get(id)
            .with_context(|| format!("`{id}` missing from {}", a.hyp.display()))?;
        pairs.push(EvalPair::new(id.clone(), r.clone(), h.clone()));
    }
    if let Some(extra) = hyp.keys().find(|id| !reference.contains_key(*id)) {
        bail!("`{extra}` missing from {}", a.reference.display());
    }
    if a.verbose {
        for p in &pairs {
            println!("{}\t{}/{}", p.utt_id, p.edits(), p.reference_len());
        }
    }
    println!("CER={}%", corpus_cer(&pairs)?);
    Ok(())
}

fn run(a: Run) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = a.out_dir {
        set("out_dir", v.display().to_string())?;
    }
    if let Some(v) = a.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = a.mode {
        set("mode", v)?;
    }
    if let Some(v) = a.k {
        set("k", v.to_string())?;
    }
    if let Some(v) = a.merges {
        set("bpe_merges", v.to_string())?;
    }
    if let Some(v) = a.dedup {
        set("dedup", v)?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
        set(k.trim(), v.trim().to_string())?;
    }
    let report = run_pipeline(&cfg)?;
    print!("{}", report.to_human());
    println!("report written to {}", cfg.out_dir.join("report.txt").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainWeights(a) => train_weights(a),
        Command::ExportWeights(a) => Ok(export_weight_csv(&load_weights(&a.weights)?, &a.out)?),
        Command::Aggregate(a) => aggregate(a),
        Command::TrainKmeans(a) => train_kmeans(a),
        Command::Tokenize(a) => tokenize_cmd(a),
        Command::Dedup(a) => {
            let seqs: Vec<UnitSequence> = sidecar::read_units(&a.units)?.iter().map(dedup).collect();
            Ok(sidecar::write_units(&a.out, &seqs)?)
        }
        Command::BpeTrain(a) => bpe_train_cmd(a),
        Command::BpeApply(a) => bpe_apply(a),
        Command::Bitrate(a) => bitrate_cmd(a),
        Command::TrainDiscrete(a) => train_discrete_cmd(a),
        Command::EvalCer(a) => eval_cer(a),
        Command::Cer(a) => cer(a),
        Command::Run(a) => run(a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
