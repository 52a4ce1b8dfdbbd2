//! End-to-end audits: corpus, splits, shadow and target recognisers, feature
//! extraction, forests over several seeds, and the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{rf_score, rf_train, Forest, MIExample, RfConfig};
use crate::error::{Error, Result};
use crate::error_features::{error_block, BLOCK_NAMES};
use crate::metrics::{metrics_report, MetricsReport, ScoredSet};
use crate::model::{beam_decode, init_model, loss_pair, train, Checkpoint, ModelConfig, TrainConfig};
use crate::perturb::{adversarial_features, gaussian_features, AdvConfig, GaussianConfig};
use crate::synth::{
    build_splits, gen_corpus, partition_corpus, select, CorpusConfig, Level, SplitManifest,
    SplitSizes, Utterance,
};
use crate::util::{derive_seed, mean_std, sha256_hex};

/// Membership feature sets, from black-box transcription errors up to
/// white-box adversarial probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    #[serde(rename = "errors")]
    Errors,
    #[serde(rename = "losses")]
    Losses,
    #[serde(rename = "losses+GF")]
    LossesGf,
    #[serde(rename = "losses+AF")]
    LossesAf,
    #[serde(rename = "losses+GF+AF")]
    LossesGfAf,
}

/// What an auditor must be able to do with the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Access {
    /// Output log-probabilities (and optionally an n-best list) only.
    GreyBox,
    /// Forward queries on inputs of the auditor's choosing.
    Query,
    /// Gradients with respect to the input.
    WhiteBox,
}

impl Access {
    pub fn describe(self) -> &'static str {
        match self {
            Access::GreyBox => "grey-box",
            Access::Query => "query (forward passes on perturbed inputs)",
            Access::WhiteBox => "white-box (input gradients)",
        }
    }
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 5] = [
        FeatureSet::Errors,
        FeatureSet::Losses,
        FeatureSet::LossesGf,
        FeatureSet::LossesAf,
        FeatureSet::LossesGfAf,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FeatureSet::Errors => "errors",
            FeatureSet::Losses => "losses",
            FeatureSet::LossesGf => "losses+GF",
            FeatureSet::LossesAf => "losses+AF",
            FeatureSet::LossesGfAf => "losses+GF+AF",
        }
    }

    /// (errors, losses, gaussian, adversarial)
    fn parts(self) -> (bool, bool, bool, bool) {
        match self {
            FeatureSet::Errors => (true, false, false, false),
            FeatureSet::Losses => (false, true, false, false),
            FeatureSet::LossesGf => (false, true, true, false),
            FeatureSet::LossesAf => (false, true, false, true),
            FeatureSet::LossesGfAf => (false, true, true, true),
        }
    }

    pub fn required_access(self) -> Access {
        match self.parts() {
            (_, _, _, true) => Access::WhiteBox,
            (_, _, true, _) => Access::Query,
            _ => Access::GreyBox,
        }
    }
}

impl std::fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSet::ALL
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown feature set `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Hypotheses per error-feature block.
    pub n_best: usize,
    pub beam_size: usize,
    pub gaussian: GaussianConfig,
    pub adversarial: AdvConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            n_best: 4,
            beam_size: 8,
            gaussian: GaussianConfig::default(),
            adversarial: AdvConfig::default(),
        }
    }
}

/// Ordered column names of one feature set. Depends only on configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub feature_set: FeatureSet,
    pub columns: Vec<String>,
}

impl FeatureLayout {
    pub fn new(feature_set: FeatureSet, cfg: &ExtractConfig) -> Self {
        let (errors, losses, gf, af) = feature_set.parts();
        let mut columns = Vec::new();
        if errors {
            for r in 0..cfg.n_best {
                columns.extend(BLOCK_NAMES.iter().map(|n| format!("h{r}.{n}")));
            }
        }
        if losses {
            columns.push("attention_kl".into());
            columns.push("ctc".into());
        }
        if gf {
            for db in &cfg.gaussian.snrs_db {
                for stat in ["att_mean", "att_std", "ctc_mean", "ctc_std"] {
                    columns.push(format!("gf.{db}dB.{stat}"));
                }
            }
        }
        if af {
            for eps in &cfg.adversarial.radii {
                columns.push(format!("af.{eps}.att"));
                columns.push(format!("af.{eps}.ctc"));
            }
        }
        FeatureLayout {
            feature_set,
            columns,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        sha256_hex(&json)
    }
}

/// Every feature family computed for one utterance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Families {
    pub errors: Option<Vec<f64>>,
    pub losses: Option<[f64; 2]>,
    pub gaussian: Option<Vec<f64>>,
    pub adversarial: Option<Vec<f64>>,
}

pub fn compute_families(
    model: &Checkpoint,
    utt: &Utterance,
    sets: &[FeatureSet],
    cfg: &ExtractConfig,
) -> Result<Families> {
    let need = sets.iter().fold((false, false, false, false), |acc, s| {
        let p = s.parts();
        (acc.0 || p.0, acc.1 || p.1, acc.2 || p.2, acc.3 || p.3)
    });
    let mut f = Families::default();
    if need.0 {
        let hyps = beam_decode(model, &utt.frames, cfg.beam_size, cfg.n_best)?;
        f.errors = Some(error_block(&utt.target, &hyps, cfg.n_best)?);
    }
    if need.1 {
        f.losses = Some(loss_pair(model, &utt.frames, &utt.target)?.clamped());
    }
    if need.2 {
        f.gaussian = Some(gaussian_features(
            model,
            &utt.utterance_id,
            &utt.frames,
            &utt.target,
            &cfg.gaussian,
        )?);
    }
    if need.3 {
        f.adversarial = Some(adversarial_features(
            model,
            &utt.utterance_id,
            &utt.frames,
            &utt.target,
            &cfg.adversarial,
        )?);
    }
    Ok(f)
}

/// Concatenates the families a feature set uses, in layout order.
pub fn assemble(set: FeatureSet, f: &Families) -> Result<Vec<f64>> {
    let (errors, losses, gf, af) = set.parts();
    let missing = |what: &str| Error::invalid(format!("feature set {set} needs {what} features"));
    let mut out = Vec::new();
    if errors {
        out.extend_from_slice(f.errors.as_ref().ok_or_else(|| missing("error"))?);
    }
    if losses {
        out.extend_from_slice(f.losses.as_ref().ok_or_else(|| missing("loss"))?);
    }
    if gf {
        out.extend_from_slice(f.gaussian.as_ref().ok_or_else(|| missing("gaussian"))?);
    }
    if af {
        out.extend_from_slice(f.adversarial.as_ref().ok_or_else(|| missing("adversarial"))?);
    }
    Ok(out)
}

/// Examples for every requested feature set, sorted by utterance id.
/// Utterances are processed in parallel; results do not depend on the
/// schedule.
pub fn extract_examples(
    model: &Checkpoint,
    labelled: &[(&Utterance, u8)],
    sets: &[FeatureSet],
    cfg: &ExtractConfig,
) -> Result<BTreeMap<FeatureSet, Vec<MIExample>>> {
    let mut items: Vec<(&Utterance, u8)> = labelled.to_vec();
    items.sort_by(|a, b| a.0.utterance_id.cmp(&b.0.utterance_id));
    let fams: Vec<Families> = items
        .par_iter()
        .map(|(u, _)| compute_families(model, u, sets, cfg))
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for &set in sets {
        let mut examples = Vec::with_capacity(items.len());
        for ((u, label), f) in items.iter().zip(&fams) {
            examples.push(MIExample {
                utterance_id: u.utterance_id.clone(),
                speaker_id: u.speaker_id.clone(),
                label: *label,
                feature_set: set.tag().to_string(),
                features: assemble(set, f)?,
            });
        }
        out.insert(set, examples);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFileHeader {
    pub format: String,
    pub version: u32,
    pub layout: FeatureLayout,
    pub layout_fingerprint: String,
    pub count: usize,
}

const FEATURE_FORMAT: &str = "miaudit-features";

fn check_layout(layout: &FeatureLayout, examples: &[MIExample]) -> Result<()> {
    for e in examples {
        if e.features.len() != layout.width() || e.feature_set != layout.feature_set.tag() {
            return Err(Error::Layout(format!(
                "`{}` has {} {} features, layout wants {} {}",
                e.utterance_id,
                e.features.len(),
                e.feature_set,
                layout.width(),
                layout.feature_set
            )));
        }
    }
    Ok(())
}

/// Writes a JSON-lines feature file: header, then one example per line.
pub fn save_features(path: &Path, layout: &FeatureLayout, examples: &[MIExample]) -> Result<()> {
    check_layout(layout, examples)?;
    let header = FeatureFileHeader {
        format: FEATURE_FORMAT.into(),
        version: 1,
        layout: layout.clone(),
        layout_fingerprint: layout.fingerprint(),
        count: examples.len(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for e in examples {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<(FeatureLayout, Vec<MIExample>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format(0, "empty feature file"))?;
    let header: FeatureFileHeader = serde_json::from_str(&first)
        .map_err(|e| Error::format(0, format!("bad feature header: {e}")))?;
    if header.format != FEATURE_FORMAT || header.version != 1 {
        return Err(Error::format(0, "unsupported feature file format"));
    }
    if header.layout.fingerprint() != header.layout_fingerprint {
        return Err(Error::Fingerprint {
            expected: header.layout_fingerprint,
            computed: header.layout.fingerprint(),
        });
    }
    let mut offset = first.len() as u64 + 1;
    let mut examples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            examples.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(offset, format!("bad example: {e}")))?,
            );
        }
        offset += line.len() as u64 + 1;
    }
    if examples.len() != header.count {
        return Err(Error::format(
            offset,
            format!("header promises {} examples, found {}", header.count, examples.len()),
        ));
    }
    check_layout(&header.layout, &examples)?;
    Ok((header.layout, examples))
}

/// Adds examples to a feature file, creating it if needed. The existing
/// layout must match exactly.
pub fn append_features(path: &Path, layout: &FeatureLayout, examples: &[MIExample]) -> Result<()> {
    let mut all = if path.exists() {
        let (existing, ex) = load_features(path)?;
        if existing.fingerprint() != layout.fingerprint() {
            return Err(Error::Layout(format!(
                "cannot append {} features to a {} file with a different layout",
                layout.feature_set, existing.feature_set
            )));
        }
        ex
    } else {
        Vec::new()
    };
    all.extend_from_slice(examples);
    all.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    save_features(path, layout, &all)
}

/// Full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub splits: SplitSizes,
    pub levels: Vec<Level>,
    pub feature_sets: Vec<FeatureSet>,
    pub target_model: ModelConfig,
    /// Separate shadow model; when absent the target model is its own
    /// shadow and no corpus partition is made.
    pub shadow_model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub features: ExtractConfig,
    pub rf: RfConfig,
    pub fpr_targets: Vec<f64>,
    /// One forest per seed; metrics are aggregated over seeds.
    pub seeds: Vec<u64>,
    /// Seed for splits and corpus partitioning.
    pub split_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            splits: SplitSizes::default(),
            levels: vec![Level::Sample, Level::Speaker],
            feature_sets: FeatureSet::ALL.to_vec(),
            target_model: ModelConfig::default(),
            shadow_model: None,
            train: TrainConfig::default(),
            features: ExtractConfig::default(),
            rf: RfConfig::default(),
            fpr_targets: crate::metrics::FPR_TARGETS.to_vec(),
            seeds: vec![0, 1, 2],
            split_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let models = std::iter::once(&self.target_model).chain(self.shadow_model.as_ref());
        for m in models {
            m.validate()?;
            if m.input_dim != self.corpus.input_dim || m.vocab_size != self.corpus.vocab_size {
                return Err(Error::invalid(
                    "model input_dim and vocab_size must match the corpus",
                ));
            }
        }
        if self.levels.is_empty() || self.feature_sets.is_empty() {
            return Err(Error::invalid("need at least one level and one feature set"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("need at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        for &t in &self.fpr_targets {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid(format!("FPR target {t} outside (0, 1)")));
            }
        }
        if self.features.n_best == 0 || self.features.beam_size < self.features.n_best {
            return Err(Error::invalid("need beam_size >= n_best >= 1"));
        }
        self.features.gaussian.validate()?;
        self.features.adversarial.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn shadow_config(&self) -> &ModelConfig {
        self.shadow_model.as_ref().unwrap_or(&self.target_model)
    }

    pub fn layout(&self, set: FeatureSet) -> FeatureLayout {
        FeatureLayout::new(set, &self.features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Shadow,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Shadow => "shadow",
            Role::Target => "target",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shadow" => Ok(Role::Shadow),
            "target" => Ok(Role::Target),
            other => Err(Error::invalid(format!("unknown role `{other}`"))),
        }
    }
}

/// Splits used at one membership level. With a shared model both manifests
/// are the same.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    pub level: Level,
    pub shadow: SplitManifest,
    pub target: SplitManifest,
    pub shared: bool,
}

impl LevelPlan {
    pub fn split(&self, role: Role) -> &SplitManifest {
        match role {
            Role::Shadow => &self.shadow,
            Role::Target => &self.target,
        }
    }
}

pub fn plan_level(cfg: &ExperimentConfig, corpus: &[Utterance], level: Level) -> Result<LevelPlan> {
    if cfg.shadow_model.is_none() {
        let m = build_splits(corpus, level, &cfg.splits, cfg.split_seed)?;
        return Ok(LevelPlan {
            level,
            shadow: m.clone(),
            target: m,
            shared: true,
        });
    }
    let (shadow_half, target_half) = partition_corpus(corpus, cfg.split_seed);
    let shadow = build_splits(&shadow_half, level, &cfg.splits, cfg.split_seed)?;
    let target = build_splits(
        &target_half,
        level,
        &cfg.splits,
        derive_seed(cfg.split_seed, "target-split", &[]),
    )?;
    Ok(LevelPlan {
        level,
        shadow,
        target,
        shared: false,
    })
}

/// Trains the recogniser for `role` on that role's training list.
pub fn train_role(
    cfg: &ExperimentConfig,
    corpus: &[Utterance],
    plan: &LevelPlan,
    role: Role,
) -> Result<Checkpoint> {
    let model_cfg = match role {
        Role::Shadow => cfg.shadow_config(),
        Role::Target => &cfg.target_model,
    };
    let data = select(corpus, &plan.split(role).asr_train)?;
    train(&init_model(model_cfg)?, &data, &cfg.train)
}

/// Classifier training examples come from the shadow split; test examples
/// from the target split.
pub fn labelled_for<'a>(
    corpus: &'a [Utterance],
    plan: &LevelPlan,
    role: Role,
) -> Result<Vec<(&'a Utterance, u8)>> {
    let m = plan.split(role);
    let (pos, neg) = match role {
        Role::Shadow => (&m.mi_train_pos, &m.mi_train_neg),
        Role::Target => (&m.mi_test_pos, &m.mi_test_neg),
    };
    let mut out: Vec<(&Utterance, u8)> = select(corpus, pos)?.into_iter().map(|u| (u, 1)).collect();
    out.extend(select(corpus, neg)?.into_iter().map(|u| (u, 0)));
    Ok(out)
}

pub(crate) fn same_layout(train: &[MIExample], test: &[MIExample]) -> Result<()> {
    let (a, b) = match (train.first(), test.first()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("empty classifier train or test set")),
    };
    if a.feature_set != b.feature_set || a.features.len() != b.features.len() {
        return Err(Error::Layout(format!(
            "train features are {} x{}, test features are {} x{}",
            a.feature_set,
            a.features.len(),
            b.feature_set,
            b.features.len()
        )));
    }
    Ok(())
}

pub fn forest_seed(rf: &RfConfig, seed: u64) -> u64 {
    derive_seed(rf.seed, "forest", &[seed])
}

/// Trains one forest per seed on `train` and scores `test`.
pub fn train_forests(
    train: &[MIExample],
    rf: &RfConfig,
    seeds: &[u64],
) -> Result<Vec<Forest>> {
    seeds
        .iter()
        .map(|&s| {
            rf_train(
                train,
                &RfConfig {
                    seed: forest_seed(rf, s),
                    ..rf.clone()
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub level: Level,
    pub feature_set: FeatureSet,
    pub seed: u64,
    pub utterance_id: String,
    pub speaker_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub level: Level,
    pub feature_set: FeatureSet,
    pub seed: u64,
    pub speaker_id: String,
    pub n_utterances: usize,
    pub member_fraction: f64,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureResult {
    pub level: Level,
    pub feature_set: FeatureSet,
    pub layout_fingerprint: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: Summary,
    /// Population standard deviation over seeds; absent for one seed.
    pub std: Option<Summary>,
}

fn aggregate(reports: &[MetricsReport]) -> (Summary, Option<Summary>) {
    let stat = |f: &dyn Fn(&MetricsReport) -> f64| {
        mean_std(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let (acc_m, acc_s) = stat(&|r| r.accuracy);
    let (auc_m, auc_s) = stat(&|r| r.auc);
    let mut tm = BTreeMap::new();
    let mut ts = BTreeMap::new();
    for key in reports[0].tpr_at_fpr.keys() {
        let (m, s) = stat(&|r| r.tpr_at_fpr[key]);
        tm.insert(key.clone(), m);
        ts.insert(key.clone(), s);
    }
    let mean = Summary {
        accuracy: acc_m,
        auc: auc_m,
        tpr_at_fpr: tm,
    };
    let std = (reports.len() > 1).then_some(Summary {
        accuracy: acc_s,
        auc: auc_s,
        tpr_at_fpr: ts,
    });
    (mean, std)
}

/// Scores `test` with every forest and summarises the metrics over seeds.
pub fn evaluate(
    level: Level,
    set: FeatureSet,
    layout: &FeatureLayout,
    forests: &[Forest],
    seeds: &[u64],
    test: &[MIExample],
    fpr_targets: &[f64],
) -> Result<(FeatureResult, Vec<ScoreRow>)> {
    if forests.len() != seeds.len() || forests.is_empty() {
        return Err(Error::invalid("need one forest per seed"));
    }
    check_layout(layout, test)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (forest, &seed) in forests.iter().zip(seeds) {
        if forest.n_features != layout.width() || forest.feature_set != set.tag() {
            return Err(Error::Layout(format!(
                "forest was trained on {} x{}, test layout is {} x{}",
                forest.feature_set,
                forest.n_features,
                set,
                layout.width()
            )));
        }
        let scores: Vec<f64> = test
            .iter()
            .map(|e| rf_score(forest, &e.features))
            .collect::<Result<_>>()?;
        for (e, &score) in test.iter().zip(&scores) {
            rows.push(ScoreRow {
                level,
                feature_set: set,
                seed,
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                label: e.label,
                score,
            });
        }
        let scored = ScoredSet::new(scores, test.iter().map(|e| e.label).collect())?;
        reports.push(metrics_report(&scored, set.tag(), level.as_str(), fpr_targets)?);
    }
    let (mean, std) = aggregate(&reports);
    Ok((
        FeatureResult {
            level,
            feature_set: set,
            layout_fingerprint: layout.fingerprint(),
            seeds: seeds.to_vec(),
            per_seed: reports,
            mean,
            std,
        },
        rows,
    ))
}

pub fn speaker_scores(rows: &[ScoreRow]) -> Vec<SpeakerScore> {
    let mut groups: BTreeMap<(Level, FeatureSet, u64, &str), Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.level, r.feature_set, r.seed, &r.speaker_id))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((level, feature_set, seed, spk), rs)| {
            let n = rs.len() as f64;
            SpeakerScore {
                level,
                feature_set,
                seed,
                speaker_id: spk.to_string(),
                n_utterances: rs.len(),
                member_fraction: rs.iter().map(|r| f64::from(r.label)).sum::<f64>() / n,
                mean_score: rs.iter().map(|r| r.score).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub level: Level,
    pub role: Role,
    pub architecture: String,
    pub num_params: usize,
    pub training: crate::model::TrainingMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tool_version: String,
    /// Seconds since the Unix epoch when the report was produced.
    pub created_unix: u64,
    pub config: ExperimentConfig,
    pub models: Vec<ModelSummary>,
    pub results: Vec<FeatureResult>,
    pub scores: Vec<ScoreRow>,
    pub speaker_scores: Vec<SpeakerScore>,
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl AuditReport {
    pub fn new(
        config: ExperimentConfig,
        models: Vec<ModelSummary>,
        results: Vec<FeatureResult>,
        scores: Vec<ScoreRow>,
    ) -> Self {
        AuditReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now_unix(),
            speaker_scores: speaker_scores(&scores),
            config,
            models,
            results,
            scores,
        }
    }

    pub fn result(&self, level: Level, set: FeatureSet) -> Option<&FeatureResult> {
        self.results
            .iter()
            .find(|r| r.level == level && r.feature_set == set)
    }

    /// Equality ignoring the creation time.
    pub fn same_content(&self, other: &AuditReport) -> bool {
        let mut a = self.clone();
        a.created_unix = other.created_unix;
        &a == other
    }

    /// Recomputes every per-seed metric from the embedded score table.
    pub fn verify_scores(&self) -> Result<()> {
        for r in &self.results {
            for (seed, rep) in r.seeds.iter().zip(&r.per_seed) {
                let rows: Vec<&ScoreRow> = self
                    .scores
                    .iter()
                    .filter(|s| s.level == r.level && s.feature_set == r.feature_set && s.seed == *seed)
                    .collect();
                let set = ScoredSet::new(
                    rows.iter().map(|s| s.score).collect(),
                    rows.iter().map(|s| s.label).collect(),
                )?;
                let again = metrics_report(
                    &set,
                    r.feature_set.tag(),
                    r.level.as_str(),
                    &self.config.fpr_targets,
                )?;
                if &again != rep {
                    return Err(Error::invalid(format!(
                        "metrics for {} / {} / seed {seed} do not match the score table",
                        r.level.as_str(),
                        r.feature_set
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(e.column() as u64, e.to_string()))
    }

    /// `level,feature_set,seed,fpr,tpr,threshold` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("level,feature_set,seed,fpr,tpr,threshold\n");
        for r in &self.results {
            for (seed, rep) in r.seeds.iter().zip(&r.per_seed) {
                for p in &rep.roc {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        r.level.as_str(),
                        r.feature_set,
                        seed,
                        p.fpr,
                        p.tpr,
                        p.threshold
                    );
                }
            }
        }
        out
    }

    /// Plain-text table of mean (± std) metrics per level and feature set.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let keys: Vec<String> = self.config.fpr_targets.iter().map(|t| crate::metrics::fpr_key(*t)).collect();
        let _ = write!(out, "{:<8} {:<14} {:>15} {:>15}", "level", "features", "accuracy", "auc");
        for k in &keys {
            let _ = write!(out, " {:>15}", format!("tpr@fpr={k}"));
        }
        out.push('\n');
        let cell = |m: f64, s: Option<f64>| match s {
            Some(s) => format!("{:.3}±{:.3}", m, s),
            None => format!("{m:.3}"),
        };
        for r in &self.results {
            let std = r.std.as_ref();
            let _ = write!(
                out,
                "{:<8} {:<14} {:>15} {:>15}",
                r.level.as_str(),
                r.feature_set.tag(),
                cell(r.mean.accuracy, std.map(|s| s.accuracy)),
                cell(r.mean.auc, std.map(|s| s.auc))
            );
            for k in &keys {
                let _ = write!(
                    out,
                    " {:>15}",
                    cell(r.mean.tpr_at_fpr[k], std.map(|s| s.tpr_at_fpr[k]))
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Everything a full run produces, for callers that persist artifacts.
pub struct RunOutput {
    pub report: AuditReport,
    pub models: Vec<(Level, Role, Checkpoint)>,
    pub forests: Vec<(Level, FeatureSet, u64, Forest)>,
}

/// Runs the whole audit in memory. `log` receives progress lines.
pub fn run_experiment(cfg: &ExperimentConfig, log: &dyn Fn(&str)) -> Result<RunOutput> {
    cfg.validate()?;
    let corpus = gen_corpus(&cfg.corpus)?.utterances;
    log(&format!("corpus: {} utterances", corpus.len()));
    let mut models = Vec::new();
    let mut summaries = Vec::new();
    let mut results = Vec::new();
    let mut scores = Vec::new();
    let mut forests_out = Vec::new();

    for &level in &cfg.levels {
        let plan = plan_level(cfg, &corpus, level)?;
        let target = train_role(cfg, &corpus, &plan, Role::Target)?;
        log(&format!(
            "{} target model: token accuracy {:.3}, exact {:.3}",
            level.as_str(),
            target.training.greedy_token_accuracy.unwrap_or(f64::NAN),
            target.training.greedy_exact_match.unwrap_or(f64::NAN)
        ));
        let shadow = if plan.shared {
            target.clone()
        } else {
            let s = train_role(cfg, &corpus, &plan, Role::Shadow)?;
            log(&format!(
                "{} shadow model: token accuracy {:.3}",
                level.as_str(),
                s.training.greedy_token_accuracy.unwrap_or(f64::NAN)
            ));
            s
        };
        let train_ex = extract_examples(
            &shadow,
            &labelled_for(&corpus, &plan, Role::Shadow)?,
            &cfg.feature_sets,
            &cfg.features,
        )?;
        let test_ex = extract_examples(
            &target,
            &labelled_for(&corpus, &plan, Role::Target)?,
            &cfg.feature_sets,
            &cfg.features,
        )?;
        log(&format!("{} features extracted", level.as_str()));

        for &set in &cfg.feature_sets {
            let (tr, te) = (&train_ex[&set], &test_ex[&set]);
            same_layout(tr, te)?;
            let forests = train_forests(tr, &cfg.rf, &cfg.seeds)?;
            let (res, rows) = evaluate(
                level,
                set,
                &cfg.layout(set),
                &forests,
                &cfg.seeds,
                te,
                &cfg.fpr_targets,
            )?;
            log(&format!(
                "{} {:<14} auc {:.3} acc {:.3}",
                level.as_str(),
                set.tag(),
                res.mean.auc,
                res.mean.accuracy
            ));
            results.push(res);
            scores.extend(rows);
            for (f, &s) in forests.into_iter().zip(&cfg.seeds) {
                forests_out.push((level, set, s, f));
            }
        }

        for (role, m) in [(Role::Target, &target), (Role::Shadow, &shadow)] {
            summaries.push(ModelSummary {
                level,
                role,
                architecture: m.config.architecture.as_str().to_string(),
                num_params: m.num_params(),
                training: m.training.clone(),
            });
        }
        models.push((level, Role::Target, target));
        if !plan.shared {
            models.push((level, Role::Shadow, shadow));
        }
    }
    Ok(RunOutput {
        report: AuditReport::new(cfg.clone(), summaries, results, scores),
        models,
        forests: forests_out,
    })
}
