use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dsu_core::Codebook;

fn dsu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsu"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run dsu")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dsu(dir, args);
    assert!(
        out.status.success(),
        "dsu {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_by_stage_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-synth", "--classes", "6", "--layers", "3", "--planted", "3", "--dim", "8", "--noise", "0", "--seed", "4", "--utts", "60", "--out", "f.dsua"]);
    for f in ["f.dsua", "f.dsua.transcripts.tsv", "f.dsua.durations.tsv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(d, &["train-weights", "--archive", "f.dsua", "--transcripts", "f.dsua.transcripts.tsv", "--mode", "pretrained", "--out-weights", "w.txt", "--out-model", "p.txt"]);
    assert!(fs::read_to_string(d.join("w.txt")).unwrap().starts_with("mode=pretrained\neps="));
    assert!(fs::read_to_string(d.join("p.txt")).unwrap().starts_with("dsu-probe v1 8 "));

    ok(d, &["export-weights", "--weights", "w.txt", "--out", "w.csv"]);
    let csv = fs::read_to_string(d.join("w.csv")).unwrap();
    let rows: Vec<(&str, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (i, w) = l.split_once(',').unwrap();
            (i, w.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].0, "final_norm");
    let top = rows.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(top.0, "3");

    ok(d, &["train-kmeans", "--features", "f.dsua", "--weights", "w.txt", "--k", "6", "--out", "cb.dsuk"]);
    assert_eq!(&fs::read(d.join("cb.dsuk")).unwrap()[..4], b"DSUK");
    ok(d, &["tokenize", "--archive", "f.dsua", "--weights", "w.txt", "--codebook", "cb.dsuk", "--out", "units.tsv"]);
    ok(d, &["dedup", "--units", "units.tsv", "--out", "dd.tsv"]);
    ok(d, &["bpe-train", "--units", "dd.tsv", "--merges", "10", "--vocab", "6", "--out", "bpe.txt"]);
    assert!(fs::read_to_string(d.join("bpe.txt")).unwrap().starts_with("dsu-bpe v1 6\n"));
    ok(d, &["bpe-apply", "--units", "dd.tsv", "--model", "bpe.txt", "--out", "bpe.tsv"]);

    let rate = |file: &str, vocab: &str| -> f64 {
        let out = ok(d, &["bitrate", "--units", file, "--duration-file", "f.dsua.durations.tsv", "--vocab", vocab]);
        let line = out.lines().find(|l| l.starts_with("bitrate=")).unwrap();
        line["bitrate=".len()..].trim_end_matches(" bits/s").parse().unwrap()
    };
    let (raw, ded) = (rate("units.tsv", "6"), rate("dd.tsv", "6"));
    assert!((raw / ded - 3.0).abs() < 1e-9, "{raw} {ded}");

    ok(d, &["train-discrete", "--units", "units.tsv", "--transcripts", "f.dsua.transcripts.tsv", "--vocab", "6", "--out", "dm.txt"]);
    let eval = ok(d, &["eval-cer", "--model", "dm.txt", "--units", "units.tsv", "--transcripts", "f.dsua.transcripts.tsv", "--hyp-out", "hyp.tsv"]);
    let cer: f64 = eval.lines().next().unwrap().trim_start_matches("CER=").trim_end_matches('%').parse().unwrap();
    assert!(cer < 2.0, "{eval}");
    let direct = ok(d, &["cer", "--ref", "f.dsua.transcripts.tsv", "--hyp", "hyp.tsv"]);
    assert_eq!(direct.lines().next(), eval.lines().next());
}

#[test]
fn aggregate_then_cluster_matches_direct_clustering() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-synth", "--utts", "20", "--out", "f.dsua"]);
    fs::write(d.join("w.txt"), "mode=finetuned\neps=0.00001\n0.1 2 -1 0\n").unwrap();
    ok(d, &["aggregate", "--archive", "f.dsua", "--weights", "w.txt", "--out", "agg.dsua"]);
    ok(d, &["train-kmeans", "--features", "agg.dsua", "--k", "8", "--out", "a.dsuk"]);
    ok(d, &["train-kmeans", "--features", "f.dsua", "--weights", "w.txt", "--k", "8", "--out", "b.dsuk"]);
    // The aggregated archive stores f32, so centroids agree to rounding only.
    let a = Codebook::<f64>::load(d.join("a.dsuk")).unwrap();
    let b = Codebook::<f64>::load(d.join("b.dsuk")).unwrap();
    for (x, y) in a.centroids().as_slice().iter().zip(b.centroids().as_slice()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
    let out = dsu(d, &["train-kmeans", "--features", "f.dsua", "--k", "8", "--out", "c.dsuk"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--weights"));
}

#[test]
fn cer_reports_percent_and_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("ref.tsv"), "a\tabcd\nb\txy\n").unwrap();
    fs::write(d.join("hyp.tsv"), "a\tabce\nb\t\n").unwrap();
    let out = ok(d, &["cer", "--ref", "ref.tsv", "--hyp", "hyp.tsv", "--verbose"]);
    assert_eq!(out, "a\t1/4\nb\t2/2\nCER=50%\n");
    fs::write(d.join("short.tsv"), "a\tabcd\n").unwrap();
    assert!(!dsu(d, &["cer", "--ref", "ref.tsv", "--hyp", "short.tsv"]).status.success());
}

#[test]
fn run_uses_config_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.cfg"), "k=8\nbpe_merges=10\nsynth.utts=50\nstage1.epochs=4\ndiscrete.epochs=4\nout_dir=ignored\n").unwrap();
    let stdout = ok(d, &["run", "--config", "run.cfg", "--out-dir", "out", "--seed", "3", "--dedup", "off", "--set", "bpe_merges=0"]);
    assert!(stdout.contains("continuous CER"));
    assert!(!d.join("ignored").exists());
    let report = fs::read_to_string(d.join("out/report.txt")).unwrap();
    let get = |k: &str| report.lines().find_map(|l| l.strip_prefix(&format!("{k}="))).unwrap().to_string();
    assert_eq!(get("seed"), "3");
    assert_eq!(get("discrete_tokens"), get("total_frames"));
    assert!(!report.contains("dedup."));
    assert!(d.join("out/summary.txt").exists());

    let bad = dsu(d, &["run", "--config", "run.cfg", "--set", "nonsense=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown config key"));
}

#[test]
fn stage_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("empty.lst"), "").unwrap();
    let out = dsu(d, &["run", "--k", "8", "--set", "synth.utts=20", "--set", "train_split=empty.lst", "--set", "test_split=empty.lst", "--out-dir", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `split` failed"));
}
