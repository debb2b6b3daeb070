use dsu_core::feature_store::{synth_generate, SynthSpec};
use dsu_core::probe::{evaluate_continuous, train_stage1, ProbeModel, TrainConfig};
use dsu_core::scalar::argmax;
use dsu_core::{AggregationMode, Error};

fn small_corpus(noise: f64, seed: u64) -> dsu_core::feature_store::SynthCorpus {
    synth_generate(&SynthSpec {
        noise_sigma: noise,
        num_utts: 80,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn planted_layer_dominates_in_both_modes() {
    let corpus = small_corpus(0.1, 4);
    for mode in [AggregationMode::Finetuned, AggregationMode::Pretrained] {
        let out = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, mode, &TrainConfig::default()).unwrap();
        let w = out.weights.weights();
        assert_eq!(argmax(&w), Some(1), "{mode}: {w:?}");
        assert!(w[1] > 0.5, "{mode}: {w:?}");
    }
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let corpus = small_corpus(0.1, 1);
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let out = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, AggregationMode::Finetuned, &cfg).unwrap();
    assert_eq!(out.loss_history.len(), 5);
    assert!(out.loss_history.windows(2).all(|w| w[1] < w[0]), "{:?}", out.loss_history);
}

#[test]
fn identical_layers_keep_uniform_weights() {
    let corpus = small_corpus(0.1, 2);
    let mut archive = dsu_core::FeatureArchive::new(3, corpus.archive.feature_dim()).unwrap();
    for u in corpus.archive.utterances() {
        let planted = u.layer_matrix::<f64>(1);
        let layers = vec![planted.clone(), planted.clone(), planted];
        archive.push(dsu_core::Utterance::from_layers(u.id(), &layers).unwrap()).unwrap();
    }
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let out = train_stage1::<f64>(&archive, &corpus.transcripts, AggregationMode::Finetuned, &cfg).unwrap();
    for w in out.weights.weights() {
        assert!((w - 1.0 / 3.0).abs() < 1e-9, "{w}");
    }
}

#[test]
fn same_seed_same_model_and_f32_works() {
    let corpus = small_corpus(0.1, 3);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let a = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, AggregationMode::Pretrained, &cfg).unwrap();
    let b = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, AggregationMode::Pretrained, &cfg).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.model, b.model);
    let c = train_stage1::<f32>(&corpus.archive, &corpus.transcripts, AggregationMode::Pretrained, &cfg).unwrap();
    assert!(c.loss_history.iter().all(|l| l.is_finite()));
}

#[test]
fn model_text_round_trips_and_keeps_predictions() {
    let corpus = small_corpus(0.0, 5);
    let out = train_stage1::<f64>(&corpus.archive, &corpus.transcripts, AggregationMode::Finetuned, &TrainConfig::default()).unwrap();
    let text = out.model.to_text();
    assert!(text.starts_with(&format!("dsu-probe v1 {} {}\n", corpus.archive.feature_dim(), out.model.vocab().size())));
    let back = ProbeModel::<f64>::from_text(&text).unwrap();
    assert_eq!(back, out.model);
    let before = evaluate_continuous(&out.weights, &out.model, &corpus.archive, &corpus.transcripts).unwrap();
    let after = evaluate_continuous(&out.weights, &back, &corpus.archive, &corpus.transcripts).unwrap();
    assert_eq!(before, after);
}

#[test]
fn bad_inputs_are_rejected() {
    let corpus = small_corpus(0.1, 6);
    let mut transcripts = corpus.transcripts.clone();
    let first = transcripts.keys().next().unwrap().clone();
    transcripts.remove(&first);
    assert!(matches!(
        train_stage1::<f64>(&corpus.archive, &transcripts, AggregationMode::Finetuned, &TrainConfig::default()),
        Err(Error::Argument(_))
    ));
    let bad = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
    assert!(train_stage1::<f64>(&corpus.archive, &corpus.transcripts, AggregationMode::Finetuned, &bad).is_err());
}
