//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! lines show up in ordinary `cargo test` output.

mod common;

use std::time::Instant;

use miaudit::classifier::{forest_bytes, rf_predict, rf_train, MIExample, RfConfig};
use miaudit::error_features::levenshtein;
use miaudit::external::{
    audit_external, export_logits, external_losses, load_milg, logits_path,
};
use miaudit::losses::{ctc_brute_force, ctc_loss_value, TokenSeq};
use miaudit::metrics::{pairwise_auc, roc_auc, tpr_at_fpr, ScoredSet};
use miaudit::model::{frame_gradient, init_model, loss_pair, Architecture, ModelConfig};
use miaudit::perturb::{
    adversarial_features, db_to_linear, pgd_perturb, scale_noise_to_snr, AdvConfig,
};
use miaudit::pipeline::{
    extract_examples, labelled_for, plan_level, run_experiment, AuditReport, ExperimentConfig,
    ExtractConfig, FeatureSet, Role,
};
use miaudit::synth::{gen_corpus, CorpusConfig, Level};
use miaudit::Error;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = r.random_range(1..=6);
        let v = r.random_range(2..=3);
        let len = r.random_range(0..=3);
        let lp = common::rand_logprobs(&mut r, t, v);
        let y = TokenSeq::new((0..len).map(|_| r.random_range(1..v as u32)).collect()).unwrap();
        let (dp, brute) = (ctc_loss_value(&lp, &y).unwrap(), ctc_brute_force(&lp, &y).unwrap());
        if brute.is_infinite() {
            ensure(dp.is_infinite(), format!("infeasible target gave {dp}"))?;
        } else {
            worst = worst.max((dp - brute).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    ensure(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!("200 instances, max deviation {worst:.1e}, {secs:.2}s"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut n = 0;
    for seed in 0..5 {
        for (name, inputs, f) in common::gradient_cases(seed) {
            let e = common::max_grad_error(&inputs, &f);
            if e > worst.0 {
                worst = (e, name);
            }
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 <= 1e-3, format!("{} relative error {:e}", worst.1, worst.0))?;
    ensure(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!("{n} checks, worst relative error {:.1e} ({}), {secs:.2}s", worst.0, worst.1))
}

fn edit_distance() -> Outcome {
    let start = Instant::now();
    let all = common::all_sequences(3, 5);
    let seq = |v: &[u32]| TokenSeq::new(v.iter().map(|t| t + 1).collect()).unwrap();
    for a in &all {
        for b in &all {
            let got = levenshtein(&seq(a), &seq(b)).edits();
            let want = common::exhaustive_edits(a, b);
            ensure(got == want, format!("{a:?} vs {b:?}: {got} != {want}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!("{} pairs, {secs:.2}s", all.len() * all.len()))
}

fn metric_oracles() -> Outcome {
    let mut r = common::rng(4);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let set = common::random_scored_set(&mut r, 500);
        let (roc, auc) = roc_auc(&set);
        worst = worst.max((auc - pairwise_auc(&set)).abs());
        let moved = ScoredSet::new(
            set.scores().iter().map(|s| (3.0 * s - 1.0).exp()).collect(),
            set.labels().to_vec(),
        )
        .unwrap();
        let (roc2, auc2) = roc_auc(&moved);
        ensure(auc == auc2, format!("set {i}: AUC changed under a monotone map"))?;
        let pts = |v: &[miaudit::metrics::RocPoint]| v.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>();
        ensure(pts(&roc) == pts(&roc2), format!("set {i}: ROC changed under a monotone map"))?;
        for t in [0.01, 0.1, 0.25, 0.5] {
            let got = tpr_at_fpr(&set, t).unwrap();
            ensure(got == common::exhaustive_tpr(&set, t), format!("set {i}: TPR@{t} differs from sweep"))?;
            ensure(got == tpr_at_fpr(&moved, t).unwrap(), format!("set {i}: TPR@{t} changed under a monotone map"))?;
        }
    }
    ensure(worst <= 1e-12, format!("trapezoid vs pair count {worst:e}"))?;
    Ok(format!("100 sets, max AUC deviation {worst:.1e}"))
}

fn perturbation() -> Outcome {
    let mut r = common::rng(5);
    let mut worst_db = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..100);
        let x = common::rand_tensor(&mut r, &[n], -3.0, 3.0);
        let d = common::rand_tensor(&mut r, &[n], -1.0, 1.0);
        let db = r.random_range(0.0..50.0);
        let delta = scale_noise_to_snr(x.data(), d.data(), db_to_linear(db)).unwrap();
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ed: f64 = delta.iter().map(|v| v * v).sum();
        worst_db = worst_db.max((10.0 * (ex / ed).log10() - db).abs());
    }
    ensure(worst_db <= 0.01, format!("SNR off by {worst_db} dB"))?;

    let m = init_model(&ModelConfig { hidden_dim: 12, seed: 8, ..ModelConfig::default() }).unwrap();
    let y = TokenSeq::new(vec![2, 7, 3]).unwrap();
    let mut on_surface = 0usize;
    for trial in 0..20u64 {
        let x = common::rand_tensor(&mut common::rng(trial), &[10, 8], -2.0, 2.0);
        for eps in [0.0, 0.001, 0.01, 0.07] {
            let mut rng = common::rng(100 + trial);
            let mut replay = rng.clone();
            let delta = pgd_perturb(&m, &x, &y, eps, 1.0, 1, &mut rng).unwrap();
            let linf = delta.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            ensure(linf <= eps, format!("||delta||_inf = {linf} > {eps}"))?;
            if eps > 0.0 {
                let start: Vec<f64> = (0..x.numel()).map(|_| replay.random_range(-eps..=eps)).collect();
                let moved: Vec<f64> = x.data().iter().zip(&start).map(|(a, b)| a + b).collect();
                let moved = miaudit::tensor::Tensor::new(x.shape().to_vec(), moved).unwrap();
                let (_, g) = frame_gradient(&m, &moved, &y).unwrap();
                for (d, gi) in delta.data().iter().zip(g.data()) {
                    if *gi != 0.0 {
                        ensure(d.abs() == eps, format!("|delta| {} != {eps} with gradient {gi}", d.abs()))?;
                        on_surface += 1;
                    }
                }
            }
        }
        let clean = loss_pair(&m, &x, &y).unwrap().clamped();
        let zero = adversarial_features(&m, "u", &x, &y, &AdvConfig { radii: vec![0.0], ..AdvConfig::default() }).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        ensure(bits(&zero) == bits(&clean), "epsilon 0 does not reproduce the clean losses")?;
    }
    Ok(format!("max SNR error {worst_db:.1e} dB, {on_surface} coordinates on the ball surface"))
}

fn auc(report: &AuditReport, level: Level, set: FeatureSet) -> Result<f64, String> {
    report
        .result(level, set)
        .map(|r| r.mean.auc)
        .ok_or_else(|| format!("no result for {} {set}", level.as_str()))
}

fn tpr10(report: &AuditReport, level: Level, set: FeatureSet) -> Result<f64, String> {
    report
        .result(level, set)
        .map(|r| r.mean.tpr_at_fpr["0.1"])
        .ok_or_else(|| format!("no result for {} {set}", level.as_str()))
}

fn sample_ordering(report: &AuditReport, secs: f64) -> Outcome {
    let (l, e) = (
        auc(report, Level::Sample, FeatureSet::Losses)?,
        auc(report, Level::Sample, FeatureSet::Errors)?,
    );
    let (tl, te) = (
        tpr10(report, Level::Sample, FeatureSet::Losses)?,
        tpr10(report, Level::Sample, FeatureSet::Errors)?,
    );
    let detail = format!(
        "AUC losses {l:.3} vs errors {e:.3} (gap {:.3}), TPR@0.1 {tl:.3} vs {te:.3}, run {secs:.0}s",
        l - e
    );
    ensure(l >= e + 0.10, format!("gap below 0.10: {detail}"))?;
    ensure(l >= 0.80, format!("losses AUC below 0.80: {detail}"))?;
    ensure(e >= 0.55, format!("errors AUC below 0.55: {detail}"))?;
    ensure(tl > te, format!("TPR ordering: {detail}"))?;
    ensure(secs <= 300.0, format!("full run too slow: {detail}"))?;
    Ok(detail)
}

fn speaker_signal(report: &AuditReport) -> Outcome {
    let mut parts = Vec::new();
    for set in FeatureSet::ALL {
        let a = auc(report, Level::Speaker, set)?;
        parts.push(format!("{set} {a:.3}"));
        ensure(a >= 0.55, format!("{set} speaker AUC {a:.3} < 0.55"))?;
    }
    Ok(parts.join(", "))
}

fn cross_architecture() -> Outcome {
    // Shadow and target train on disjoint halves of the corpus, so it is
    // doubled to give each half the default per-speaker utterance count.
    let base = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        corpus: CorpusConfig {
            utt_per_speaker: 2 * base.corpus.utt_per_speaker,
            ..base.corpus.clone()
        },
        shadow_model: Some(ModelConfig {
            architecture: Architecture::Convolutional,
            ..ModelConfig::default()
        }),
        ..base
    };
    let run = run_experiment(&cfg, &|_| {}).map_err(|e| e.to_string())?;
    run.report.verify_scores().map_err(|e| e.to_string())?;
    let mut lowest = (f64::INFINITY, String::new());
    for r in &run.report.results {
        if r.mean.auc < lowest.0 {
            lowest = (r.mean.auc, format!("{} {}", r.level.as_str(), r.feature_set));
        }
    }
    ensure(lowest.0 >= 0.45, format!("{} AUC {:.3}", lowest.1, lowest.0))?;
    let s = auc(&run.report, Level::Sample, FeatureSet::Losses)?;
    Ok(format!(
        "{} results, sample losses AUC {s:.3}, lowest {:.3} ({})",
        run.report.results.len(),
        lowest.0,
        lowest.1
    ))
}

fn determinism(a: &AuditReport, cfg: &ExperimentConfig) -> Outcome {
    let b = run_experiment(cfg, &|_| {}).map_err(|e| e.to_string())?.report;
    ensure(a.same_content(&b), "reports differ")?;
    Ok(format!("{} score rows identical", a.scores.len()))
}

fn external_round_trip(cfg: &ExperimentConfig, model: &miaudit::model::Checkpoint) -> Outcome {
    let corpus = gen_corpus(&cfg.corpus).map_err(|e| e.to_string())?.utterances;
    let plan = plan_level(cfg, &corpus, Level::Sample).map_err(|e| e.to_string())?;
    let labelled = labelled_for(&corpus, &plan, Role::Target).map_err(|e| e.to_string())?;
    let utts: Vec<_> = labelled.iter().map(|(u, _)| *u).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    export_logits(model, &utts, dir.path(), None).map_err(|e| e.to_string())?;
    let internal = extract_examples(model, &labelled, &[FeatureSet::Losses], &ExtractConfig::default())
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for ex in &internal[&FeatureSet::Losses] {
        let u = utts.iter().find(|u| u.utterance_id == ex.utterance_id).unwrap();
        let logits = load_milg(&logits_path(dir.path(), &u.utterance_id)).map_err(|e| e.to_string())?;
        let ext = external_losses(&logits, &u.target, model.config.label_smoothing)
            .map_err(|e| e.to_string())?
            .clamped();
        for (a, b) in ex.features.iter().zip(ext) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("loss features differ by {worst:e}"))?;

    let mut gated = cfg.clone();
    gated.levels = vec![Level::Sample];
    for set in [FeatureSet::LossesAf, FeatureSet::LossesGf, FeatureSet::LossesGfAf] {
        gated.feature_sets = vec![set];
        match audit_external(dir.path(), &plan.target, &gated) {
            Err(Error::AccessLevel { feature_set, .. }) if feature_set == set.tag() => {}
            other => return Err(format!("{set} was not rejected by access level: {other:?}")),
        }
    }
    Ok(format!(
        "{} utterances, max loss-feature difference {worst:.1e}; GF/AF requests rejected",
        utts.len()
    ))
}

fn forest_sanity() -> Outcome {
    let ex: Vec<MIExample> = (0..60)
        .map(|i| MIExample {
            utterance_id: format!("u{i:03}"),
            speaker_id: "s".into(),
            label: u8::from(i >= 30),
            feature_set: "losses".into(),
            features: vec![i as f64 * 0.1],
        })
        .collect();
    let cfg = RfConfig { seed: 17, ..RfConfig::default() };
    let f = rf_train(&ex, &cfg).map_err(|e| e.to_string())?;
    let correct = ex
        .iter()
        .filter(|e| rf_predict(&f, &e.features, 0.5).unwrap() == e.label)
        .count();
    ensure(correct == ex.len(), format!("training accuracy {correct}/{}", ex.len()))?;
    let a = forest_bytes(&f).map_err(|e| e.to_string())?;
    let b = forest_bytes(&rf_train(&ex, &cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(a == b, "serialized forests differ")?;
    Ok(format!("training accuracy 1.0, {} identical bytes", a.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, start: Instant, out: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL [{secs:.1}s] {why}");
            }
        }
    };

    let t = Instant::now();
    report(1, "ctc oracle", t, ctc_oracle());
    let t = Instant::now();
    report(2, "gradient suite", t, gradients());
    let t = Instant::now();
    report(3, "edit-distance oracle", t, edit_distance());
    let t = Instant::now();
    report(4, "metric oracles", t, metric_oracles());
    let t = Instant::now();
    report(5, "perturbation contracts", t, perturbation());

    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let run = run_experiment(&cfg, &|_| {});
    let run_secs = t.elapsed().as_secs_f64();
    match &run {
        Ok(run) => {
            report(6, "sample-level ordering", t, sample_ordering(&run.report, run_secs));
            let t = Instant::now();
            report(7, "speaker-level signal", t, speaker_signal(&run.report));
        }
        Err(e) => {
            report(6, "sample-level ordering", t, Err(format!("run failed: {e}")));
            report(7, "speaker-level signal", t, Err(format!("run failed: {e}")));
        }
    }
    let t = Instant::now();
    report(8, "cross-architecture run", t, cross_architecture());
    let t = Instant::now();
    match &run {
        Ok(run) => {
            report(9, "end-to-end determinism", t, determinism(&run.report, &cfg));
            let model = run
                .models
                .iter()
                .find(|(l, r, _)| *l == Level::Sample && *r == Role::Target)
                .map(|(_, _, m)| m)
                .expect("sample target model");
            let t = Instant::now();
            report(10, "external-audit round trip", t, external_round_trip(&cfg, model));
        }
        Err(e) => {
            report(9, "end-to-end determinism", t, Err(format!("run failed: {e}")));
            report(10, "external-audit round trip", t, Err(format!("run failed: {e}")));
        }
    }
    let t = Instant::now();
    report(11, "forest determinism", t, forest_sanity());

    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
