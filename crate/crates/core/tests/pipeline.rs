use miaudit::classifier::{rf_train, MIExample, RfConfig};
use miaudit::pipeline::{
    append_features, evaluate, load_features, run_experiment, save_features, AuditReport,
    ExperimentConfig, FeatureSet,
};
use miaudit::synth::Level;
use miaudit::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
          "corpus": {"n_speakers": 8, "utt_per_speaker": 10},
          "splits": {"asr_train_per_speaker": 4, "mi_train_per_class": 10, "mi_test_per_class": 8, "seen_speakers": 4},
          "target_model": {"hidden_dim": 8},
          "train": {"epochs": 3},
          "features": {"beam_size": 4, "gaussian": {"snrs_db": [0, 20], "runs_per_snr": 2}, "adversarial": {"radii": [0.01, 0.02]}},
          "rf": {"n_trees": 10},
          "seeds": [0, 1]
        }"#,
    )
    .unwrap()
}

#[test]
fn reports_recompute_from_their_score_tables() {
    let run = run_experiment(&tiny(), &|_| {}).unwrap();
    let r = &run.report;
    r.verify_scores().unwrap();
    assert_eq!(r.results.len(), 10);
    assert!(r.results.iter().all(|x| x.std.is_some() && x.per_seed.len() == 2));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    r.save(&p).unwrap();
    let back = AuditReport::load(&p).unwrap();
    assert_eq!(&back, r);
    back.verify_scores().unwrap();

    let mut forged = back.clone();
    forged.scores[0].label = 1 - forged.scores[0].label;
    assert!(forged.verify_scores().is_err());
}

#[test]
fn single_seed_reports_have_no_spread() {
    let cfg = ExperimentConfig {
        seeds: vec![3],
        levels: vec![Level::Sample],
        feature_sets: vec![FeatureSet::Losses],
        ..tiny()
    };
    let run = run_experiment(&cfg, &|_| {}).unwrap();
    let json = serde_json::to_value(&run.report).unwrap();
    assert!(json["results"][0]["std"].is_null());
}

#[test]
fn cross_model_guard_rejects_mismatched_layouts() {
    let cfg = tiny();
    let ex = |set: FeatureSet, width: usize, id: usize, label: u8| MIExample {
        utterance_id: format!("u{id}"),
        speaker_id: "s".into(),
        label,
        feature_set: set.tag().into(),
        features: vec![f64::from(label); width],
    };
    let train: Vec<_> = (0..6).map(|i| ex(FeatureSet::Losses, 2, i, (i % 2) as u8)).collect();
    let forest = rf_train(&train, &RfConfig { n_trees: 3, ..RfConfig::default() }).unwrap();
    let test: Vec<_> = (0..4).map(|i| ex(FeatureSet::LossesGf, 34, i, (i % 2) as u8)).collect();
    let err = evaluate(
        Level::Sample,
        FeatureSet::LossesGf,
        &cfg.layout(FeatureSet::LossesGf),
        &[forest],
        &[0],
        &test,
        &cfg.fpr_targets,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Layout(_)), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.jsonl");
    save_features(&p, &cfg.layout(FeatureSet::Losses), &train).unwrap();
    assert!(matches!(
        append_features(&p, &cfg.layout(FeatureSet::LossesGf), &test),
        Err(Error::Layout(_))
    ));
    assert_eq!(load_features(&p).unwrap().1, train);
}

#[test]
fn self_audit_on_separable_features_is_perfect() {
    let cfg = tiny();
    let ex: Vec<MIExample> = (0..40)
        .map(|i| MIExample {
            utterance_id: format!("u{i:02}"),
            speaker_id: "s".into(),
            label: (i % 2) as u8,
            feature_set: "losses".into(),
            features: vec![(i % 2) as f64 * 3.0 + (i as f64) * 0.01, 1.0],
        })
        .collect();
    let forests = miaudit::pipeline::train_forests(&ex, &cfg.rf, &cfg.seeds).unwrap();
    let (res, _) = evaluate(
        Level::Sample,
        FeatureSet::Losses,
        &cfg.layout(FeatureSet::Losses),
        &forests,
        &cfg.seeds,
        &ex,
        &cfg.fpr_targets,
    )
    .unwrap();
    assert_eq!(res.mean.accuracy, 1.0);
    assert_eq!(res.mean.auc, 1.0);
}
