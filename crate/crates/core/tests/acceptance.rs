//! Acceptance gate: one line per criterion, non-zero exit on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{all_targets, central_diff, ctc_nll_bruteforce, random_matrix, relative_error, worst_recovery};
use dsu_core::aggregator::{weighted_sum, weighted_sum_grad};
use dsu_core::ctc::{ctc_loss, ctc_loss_and_grad};
use dsu_core::discrete_probe::gap_report;
use dsu_core::feature_store::{synth_generate, SynthSpec};
use dsu_core::matrix::Matrix;
use dsu_core::pipeline::{export_weight_csv, run_pipeline, sha256_hex, PipelineConfig, RunReport};
use dsu_core::probe::{train_stage1, TrainConfig};
use dsu_core::quantizer::{kmeans_train, KmeansConfig};
use dsu_core::scalar::argmax;
use dsu_core::tokenproc::{bpe_decode, bpe_encode, bpe_train, corpus_bitrate, dedup, dedup_units, UnitSequence};
use dsu_core::{AggregationMode, Error, LayerWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {:.0?}", limit)),
            Err(d) => (false, d),
        };
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} {name}: {detail} [{:.2}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    // Three labels plus blank; logits of width 3 restrict to labels {1, 2}.
    for width in [3usize, 4] {
        for t in 1..=4 {
            for target in all_targets(width, 2) {
                for _ in 0..10 {
                    let logits = random_matrix(&mut rng, t, width, 4.0);
                    cases += 1;
                    match (ctc_nll_bruteforce(&logits, &target), ctc_loss(&logits, &target)) {
                        (Some(want), Ok(got)) => worst = worst.max((want - got).abs()),
                        (None, Err(Error::Infeasible { .. })) => {}
                        (want, got) => return Err(format!("T={t} target={target:?}: oracle {want:?}, dp {got:?}")),
                    }
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("max |Δ| {worst:e}"))?;
    Ok(format!("{cases} cases, max |Δ| {worst:.1e} (tol 1e-9)"))
}

fn ctc_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v = rng.random_range(2..6);
        let len = rng.random_range(0..4);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        let t = dsu_core::ctc::required_frames(&target) + rng.random_range(0..5);
        let logits = random_matrix(&mut rng, t, v, 3.0);
        let (_, grad) = ctc_loss_and_grad(&logits, &target).map_err(|e| e.to_string())?;
        let numeric = central_diff(logits.as_slice(), 1e-5, |x| {
            ctc_loss(&Matrix::from_vec(t, v, x.to_vec()).unwrap(), &target).unwrap()
        });
        worst = worst.max(relative_error(grad.as_slice(), &numeric));
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 instances, max relative error {worst:.1e} (tol 1e-5)"))
}

fn aggregator_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mode = if i % 2 == 0 { AggregationMode::Finetuned } else { AggregationMode::Pretrained };
        let (l, t, d) = (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..6));
        let layers: Vec<Matrix<f64>> = (0..l).map(|_| random_matrix(&mut rng, t, d, 2.0)).collect();
        let upstream = random_matrix(&mut rng, t, d, 1.0);
        let lambdas = random_matrix(&mut rng, 1, mode.weight_count(l), 2.0).into_vec();
        let w = LayerWeights::new(mode, lambdas.clone()).map_err(|e| e.to_string())?;
        let analytic = weighted_sum_grad(&layers, &w, &upstream).map_err(|e| e.to_string())?;
        let numeric = central_diff(&lambdas, 1e-5, |x| {
            let h = weighted_sum(&layers, &LayerWeights::new(mode, x.to_vec()).unwrap()).unwrap();
            h.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    ensure(worst < 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 instances, max relative error {worst:.1e} (tol 1e-6)"))
}

fn planted_layer(out_dir: &Path) -> Outcome {
    let spec = SynthSpec {
        num_layers: 4,
        planted_layer: 2,
        noise_sigma: 0.1,
        num_utts: 200,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for mode in [AggregationMode::Finetuned, AggregationMode::Pretrained] {
        let out = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, mode, &TrainConfig::default())
            .map_err(|e| e.to_string())?;
        let w = out.weights.weights();
        ensure(argmax(&w) == Some(1) && w[1] > 0.5, || format!("{mode}: weights {w:?}"))?;
        let csv_path = out_dir.join(format!("weights_{mode}.csv"));
        export_weight_csv(&out.weights, &csv_path).map_err(|e| e.to_string())?;
        let csv = fs::read_to_string(&csv_path).map_err(|e| e.to_string())?;
        let top = csv
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once(','))
            .max_by(|a, b| a.1.parse::<f64>().unwrap().total_cmp(&b.1.parse::<f64>().unwrap()))
            .map(|(idx, _)| idx.to_string());
        ensure(top.as_deref() == Some("2"), || format!("{mode}: CSV top row {top:?}"))?;
        summary.push(format!("{mode} w2={:.3}", w[1]));
    }
    Ok(summary.join(", "))
}

fn e2e_config(out: &Path, mode: AggregationMode) -> Result<PipelineConfig, String> {
    let ids: Vec<String> = (0..250).map(|i| format!("utt{i:05}")).collect();
    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let (train, test) = (out.join("train.lst"), out.join("test.lst"));
    fs::write(&train, ids[..200].join("\n")).map_err(|e| e.to_string())?;
    fs::write(&test, ids[200..].join("\n")).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::from_text("k=8\nbpe_merges=50\nsynth.utts=250\nsynth.layers=4\nsynth.planted=2\nsynth.noise=0.1\n")
        .map_err(|e| e.to_string())?;
    cfg.mode = mode;
    cfg.train_split = Some(train);
    cfg.test_split = Some(test);
    cfg.out_dir = out.join("run");
    Ok(cfg)
}

fn freeze_contract(report: &RunReport, run_dir: &Path) -> Outcome {
    let now = sha256_hex(&fs::read(run_dir.join("weights.txt")).map_err(|e| e.to_string())?);
    ensure(
        report.weights_sha256_before == report.weights_sha256_after && report.weights_sha256_after == now,
        || format!("{} / {} / {now}", report.weights_sha256_before, report.weights_sha256_after),
    )?;
    Ok(format!("sha256 {}… unchanged", &now[..16]))
}

fn kmeans_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..50 {
        let (n, d, k) = (rng.random_range(5..300), rng.random_range(1..6), rng.random_range(1..20));
        let data = random_matrix(&mut rng, n, d, 10.0);
        let (_, h) = kmeans_train(&data, &KmeansConfig { k, seed: i, ..Default::default() }).map_err(|e| e.to_string())?;
        ensure(h.windows(2).all(|w| w[1] <= w[0]), || format!("dataset {i}: history {h:?}"))?;
    }
    let tiny = Matrix::from_vec(4, 1, vec![0.0, 1.0, 9.0, 10.0]).unwrap();
    let (cb, h) = kmeans_train(&tiny, &KmeansConfig { k: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut c = cb.centroids().as_slice().to_vec();
    c.sort_by(f64::total_cmp);
    ensure(c == [0.5, 9.5] && *h.last().unwrap() == 1.0, || format!("centroids {c:?}, distortion {h:?}"))?;

    let (k, d, sigma) = (8, 6, 1.0);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..d).map(|j| if j == i % d { 10.0 * sigma * (i / d + 1) as f64 } else { 0.0 }).collect())
        .collect();
    let mut min_sep = f64::INFINITY;
    for a in 0..k {
        for b in 0..a {
            min_sep = min_sep.min(common::sq_dist(&means[a], &means[b]).sqrt());
        }
    }
    let rows: Vec<Vec<f64>> = means
        .iter()
        .flat_map(|m| {
            (0..200)
                .map(|_| {
                    m.iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            x + sigma * z
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        })
        .collect();
    let data = Matrix::from_rows(&rows).unwrap();
    let (cb, _) = kmeans_train(&data, &KmeansConfig { k, seed: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let worst = worst_recovery(&means, cb.centroids());
    ensure(worst < 0.5 * sigma, || format!("recovery error {worst:.3}σ"))?;
    Ok(format!(
        "50 monotone histories, {{0,1,9,10}} exact, recovery {:.3}σ at {:.0}σ separation",
        worst / sigma,
        min_sep / sigma
    ))
}

fn token_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let base = rng.random_range(2..10u32);
        let n_seqs = rng.random_range(1..5);
        let corpus: Vec<UnitSequence> = (0..n_seqs)
            .map(|i| {
                let len = rng.random_range(0..50);
                UnitSequence::new(format!("u{i}"), (0..len).map(|_| rng.random_range(0..base)).collect())
            })
            .collect();
        for s in &corpus {
            let once = dedup_units(&s.units);
            ensure(dedup_units(&once) == once, || format!("case {case}: dedup not idempotent"))?;
        }
        let model = bpe_train(&corpus, base, rng.random_range(0..40)).map_err(|e| e.to_string())?;
        for s in &corpus {
            let enc = bpe_encode(&s.units, &model).map_err(|e| e.to_string())?;
            ensure(bpe_decode(&enc, &model).map_err(|e| e.to_string())? == s.units, || {
                format!("case {case}: BPE round trip failed")
            })?;
        }
        // r = 3 repetitions of a repeat-free stream.
        let mut symbols: Vec<u32> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..base)).collect();
        symbols.dedup();
        let raw = UnitSequence::new("r", symbols.iter().flat_map(|&s| [s, s, s]).collect());
        let reduced = dedup(&raw);
        let secs = rng.random_range(0.5..20.0);
        let (br, bd) = (
            corpus_bitrate(std::slice::from_ref(&raw), base, secs).map_err(|e| e.to_string())?,
            corpus_bitrate(std::slice::from_ref(&reduced), base, secs).map_err(|e| e.to_string())?,
        );
        ensure(raw.units.len() == 3 * reduced.units.len() && (br / bd - 3.0).abs() < 1e-12, || {
            format!("case {case}: ratio {}", br / bd)
        })?;
    }
    Ok("1000 cases: dedup idempotent, BPE round trip, exact 3x bitrate reduction".into())
}

fn end_to_end(reports: &[RunReport]) -> Outcome {
    let mut lines = Vec::new();
    for r in reports {
        let raw = r.variant("raw").ok_or("no raw variant")?;
        let bpe = r.variant("dedup_bpe").ok_or("no dedup_bpe variant")?;
        for v in &r.variants {
            ensure(v.cer <= r.continuous_cer + 10.0, || {
                format!("{}: {} CER {:.2} vs continuous {:.2}", r.mode, v.name, v.cer, r.continuous_cer)
            })?;
        }
        ensure(bpe.cer <= raw.cer + 2.0, || format!("{}: dedup+BPE {:.2} vs raw {:.2}", r.mode, bpe.cer, raw.cer))?;
        let cers: Vec<String> = r.variants.iter().map(|v| format!("{}={:.2}", v.name, v.cer)).collect();
        lines.push(format!("{} continuous={:.2} {}", r.mode, r.continuous_cer, cers.join(" ")));
    }
    Ok(lines.join("; "))
}

fn gap() -> Outcome {
    let g = gap_report(15.6, 16.9).map_err(|e| e.to_string())?;
    ensure((g - 8.3).abs() <= 0.1, || format!("gap {g}"))?;
    Ok(format!("15.6 -> 16.9 gives {g:.2}%"))
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let a = fs::read(first.join("report.txt")).map_err(|e| e.to_string())?;
    let b = fs::read(second.join("report.txt")).map_err(|e| e.to_string())?;
    ensure(a == b, || "report.txt differs between runs".into())?;
    Ok(format!("report.txt identical ({} bytes)", a.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut gate = Gate { failures: 0 };
    let secs = Duration::from_secs;

    gate.check("ctc oracle equivalence", secs(10), ctc_oracle);
    gate.check("ctc gradient check", secs(30), ctc_gradient);
    gate.check("weighted-sum gradient check", secs(30), aggregator_gradient);
    gate.check("planted-layer recovery", secs(120), || planted_layer(tmp.path()));

    let mut reports = Vec::new();
    gate.check("end-to-end gap", secs(300), || {
        for mode in [AggregationMode::Finetuned, AggregationMode::Pretrained] {
            let cfg = e2e_config(&tmp.path().join(format!("e2e_{mode}")), mode)?;
            reports.push(run_pipeline(&cfg).map_err(|e| format!("{mode} pipeline failed: {e}"))?);
        }
        end_to_end(&reports)
    });
    let first_run = tmp.path().join("e2e_finetuned/run");
    gate.check("freeze contract", secs(1), || match reports.first() {
        Some(r) => freeze_contract(r, &first_run),
        None => Err("no pipeline run to inspect".into()),
    });
    gate.check("k-means properties", secs(30), kmeans_properties);
    gate.check("token codec", secs(10), token_codec);
    gate.check("gap arithmetic", secs(1), gap);
    gate.check("determinism", secs(300), || {
        let cfg = e2e_config(&tmp.path().join("rerun"), AggregationMode::Finetuned)?;
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
        determinism(&first_run, &tmp.path().join("rerun/run"))
    });

    if gate.failures > 0 {
        println!("acceptance: {} criterion(s) failed", gate.failures);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
