use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use miaudit::classifier::{forest_bytes, forest_from_bytes, Forest};
use miaudit::external::{audit_external, export_logits};
use miaudit::model::{load_checkpoint, save_checkpoint, Checkpoint};
use miaudit::pipeline::{
    evaluate, extract_examples, labelled_for, load_features, plan_level, run_experiment,
    save_features, train_forests, train_role, AuditReport, ExperimentConfig, FeatureSet,
    LevelPlan, ModelSummary, Role,
};
use miaudit::synth::{gen_corpus, load_corpus, save_corpus, Level, SplitManifest, Utterance};
use miaudit::{Error, Result};

#[derive(Parser)]
#[command(name = "miaudit", version, about = "Membership-inference audits for toy speech recognisers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, replacing every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "miaudit-out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and split manifests.
    Synth,
    /// Train the recogniser for one role.
    TrainAsr {
        #[arg(long, default_value = "target")]
        role: Role,
        #[arg(long)]
        level: Option<Level>,
    },
    /// Extract membership features with one role's recogniser.
    Extract {
        #[arg(long)]
        role: Option<Role>,
        #[arg(long)]
        level: Option<Level>,
    },
    /// Train one forest per seed on shadow-model features.
    TrainMi {
        #[arg(long)]
        level: Option<Level>,
    },
    /// Score target-model features and write the report.
    Evaluate,
    /// Audit a model known only through exported log-probabilities.
    AuditExternal {
        #[arg(long)]
        logits_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Check a report against its score table and print the summary.
    Report {
        /// Report to read; defaults to `<out-dir>/report.json`.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Write MILG logits (and n-best sidecars) for one role's classifier lists.
    ExportLogits {
        #[arg(long, default_value = "target")]
        role: Role,
        #[arg(long)]
        level: Option<Level>,
        /// Where to write; defaults to `<out-dir>/logits/<level>-<role>`.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        no_nbest: bool,
    },
    /// Every stage in memory, writing all artifacts.
    Run,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.corpus.seed = s;
        cfg.split_seed = s;
        cfg.target_model.seed = s;
        if let Some(m) = cfg.shadow_model.as_mut() {
            m.seed = s;
        }
        cfg.train.seed = s;
        cfg.rf.seed = s;
        cfg.features.gaussian.seed = s;
        cfg.features.adversarial.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    fn split(&self, level: Level, role: Role) -> PathBuf {
        self.root
            .join("splits")
            .join(format!("{}-{}.json", level.as_str(), role.as_str()))
    }
    fn model(&self, level: Level, role: Role) -> PathBuf {
        self.root
            .join("models")
            .join(format!("{}-{}.miac", level.as_str(), role.as_str()))
    }
    fn training_log(&self, level: Level, role: Role) -> PathBuf {
        self.root
            .join("models")
            .join(format!("{}-{}.log.json", level.as_str(), role.as_str()))
    }
    fn features(&self, level: Level, role: Role, set: FeatureSet) -> PathBuf {
        self.root.join("features").join(format!(
            "{}-{}-{}.jsonl",
            level.as_str(),
            role.as_str(),
            set.tag()
        ))
    }
    fn forest(&self, level: Level, set: FeatureSet, seed: u64) -> PathBuf {
        self.root
            .join("forests")
            .join(format!("{}-{}-{seed}.forest", level.as_str(), set.tag()))
    }
    fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    fn roc(&self) -> PathBuf {
        self.root.join("roc.csv")
    }
    fn ensure(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}

fn levels(cfg: &ExperimentConfig, only: Option<Level>) -> Vec<Level> {
    match only {
        Some(l) => vec![l],
        None => cfg.levels.clone(),
    }
}

/// With no separate shadow model the target plays both roles.
fn model_role(cfg: &ExperimentConfig, role: Role) -> Role {
    if cfg.shadow_model.is_none() {
        Role::Target
    } else {
        role
    }
}

fn load_plan(out: &Layout, cfg: &ExperimentConfig, level: Level) -> Result<LevelPlan> {
    let shadow = SplitManifest::load(&out.split(level, Role::Shadow))?;
    let target = SplitManifest::load(&out.split(level, Role::Target))?;
    Ok(LevelPlan {
        level,
        shadow,
        target,
        shared: cfg.shadow_model.is_none(),
    })
}

fn corpus(out: &Layout) -> Result<Vec<Utterance>> {
    let p = out.corpus();
    if !p.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} not found; run `miaudit synth` first",
            p.display()
        )));
    }
    load_corpus(&p)
}

fn save_training_log(out: &Layout, path: &Path, value: &miaudit::model::TrainingMeta) -> Result<()> {
    out.ensure(path)?;
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn save_model(out: &Layout, level: Level, role: Role, m: &Checkpoint) -> Result<()> {
    let p = out.model(level, role);
    out.ensure(&p)?;
    save_checkpoint(m, &p)?;
    save_training_log(out, &out.training_log(level, role), &m.training)
}

fn save_forest(out: &Layout, level: Level, set: FeatureSet, seed: u64, f: &Forest) -> Result<()> {
    let p = out.forest(level, set, seed);
    out.ensure(&p)?;
    std::fs::write(p, forest_bytes(f)?)?;
    Ok(())
}

fn save_report(out: &Layout, report: &AuditReport) -> Result<()> {
    out.ensure(&out.report())?;
    report.save(&out.report())?;
    std::fs::write(out.roc(), report.roc_csv())?;
    print!("{}", report.summary_table());
    println!("report: {}", out.report().display());
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Layout) -> Result<()> {
    let corpus = gen_corpus(&cfg.corpus)?;
    out.ensure(&out.corpus())?;
    let fp = save_corpus(&out.corpus(), &corpus.utterances)?;
    println!("corpus {} utterances, fingerprint {fp}", corpus.utterances.len());
    for &level in &cfg.levels {
        let plan = plan_level(cfg, &corpus.utterances, level)?;
        for role in [Role::Shadow, Role::Target] {
            let p = out.split(level, role);
            out.ensure(&p)?;
            plan.split(role).save(&p)?;
            println!(
                "{} {} split, fingerprint {}",
                level.as_str(),
                role.as_str(),
                plan.split(role).fingerprint
            );
        }
    }
    Ok(())
}

fn cmd_train_asr(cfg: &ExperimentConfig, out: &Layout, role: Role, only: Option<Level>) -> Result<()> {
    let corpus = corpus(out)?;
    let role = model_role(cfg, role);
    for level in levels(cfg, only) {
        let plan = load_plan(out, cfg, level)?;
        let m = train_role(cfg, &corpus, &plan, role)?;
        save_model(out, level, role, &m)?;
        println!(
            "{} {} model: final loss {:.4}, greedy token accuracy {:.3}",
            level.as_str(),
            role.as_str(),
            m.training.loss_history.last().copied().unwrap_or(f64::NAN),
            m.training.greedy_token_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_model(out: &Layout, cfg: &ExperimentConfig, level: Level, role: Role) -> Result<Checkpoint> {
    let p = out.model(level, model_role(cfg, role));
    if !p.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} not found; run `miaudit train-asr` first",
            p.display()
        )));
    }
    load_checkpoint(&p)
}

fn cmd_extract(cfg: &ExperimentConfig, out: &Layout, role: Option<Role>, only: Option<Level>) -> Result<()> {
    let corpus = corpus(out)?;
    let roles = match role {
        Some(r) => vec![r],
        None => vec![Role::Shadow, Role::Target],
    };
    for level in levels(cfg, only) {
        let plan = load_plan(out, cfg, level)?;
        for &role in &roles {
            let model = load_model(out, cfg, level, role)?;
            let labelled = labelled_for(&corpus, &plan, role)?;
            let ex = extract_examples(&model, &labelled, &cfg.feature_sets, &cfg.features)?;
            for (set, examples) in &ex {
                let p = out.features(level, role, *set);
                out.ensure(&p)?;
                save_features(&p, &cfg.layout(*set), examples)?;
                println!("{} {} {}: {} examples", level.as_str(), role.as_str(), set, examples.len());
            }
        }
    }
    Ok(())
}

fn load_role_features(
    out: &Layout,
    cfg: &ExperimentConfig,
    level: Level,
    role: Role,
    set: FeatureSet,
) -> Result<Vec<miaudit::classifier::MIExample>> {
    let (layout, ex) = load_features(&out.features(level, role, set))?;
    let want = cfg.layout(set);
    if layout.fingerprint() != want.fingerprint() {
        return Err(Error::Layout(format!(
            "{} features have layout {}, configuration expects {}",
            set,
            layout.fingerprint(),
            want.fingerprint()
        )));
    }
    Ok(ex)
}

fn cmd_train_mi(cfg: &ExperimentConfig, out: &Layout, only: Option<Level>) -> Result<()> {
    for level in levels(cfg, only) {
        for &set in &cfg.feature_sets {
            let train = load_role_features(out, cfg, level, Role::Shadow, set)?;
            let forests = train_forests(&train, &cfg.rf, &cfg.seeds)?;
            for (f, &s) in forests.iter().zip(&cfg.seeds) {
                save_forest(out, level, set, s, f)?;
            }
            println!("{} {}: {} forests", level.as_str(), set, forests.len());
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, out: &Layout) -> Result<()> {
    let mut results = Vec::new();
    let mut scores = Vec::new();
    let mut models = Vec::new();
    for &level in &cfg.levels {
        for &set in &cfg.feature_sets {
            let test = load_role_features(out, cfg, level, Role::Target, set)?;
            let forests = cfg
                .seeds
                .iter()
                .map(|&s| forest_from_bytes(&std::fs::read(out.forest(level, set, s))?))
                .collect::<Result<Vec<_>>>()?;
            let (res, rows) = evaluate(
                level,
                set,
                &cfg.layout(set),
                &forests,
                &cfg.seeds,
                &test,
                &cfg.fpr_targets,
            )?;
            results.push(res);
            scores.extend(rows);
        }
        for role in [Role::Target, Role::Shadow] {
            if let Ok(m) = load_model(out, cfg, level, role) {
                models.push(ModelSummary {
                    level,
                    role,
                    architecture: m.config.architecture.as_str().to_string(),
                    num_params: m.num_params(),
                    training: m.training,
                });
            }
        }
    }
    save_report(out, &AuditReport::new(cfg.clone(), models, results, scores))
}

fn cmd_report(out: &Layout, path: Option<PathBuf>) -> Result<()> {
    let p = path.unwrap_or_else(|| out.report());
    let report = AuditReport::load(&p)?;
    report.verify_scores()?;
    print!("{}", report.summary_table());
    println!("metrics match the embedded score table");
    Ok(())
}

fn cmd_export(
    cfg: &ExperimentConfig,
    out: &Layout,
    role: Role,
    only: Option<Level>,
    dir: Option<PathBuf>,
    no_nbest: bool,
) -> Result<()> {
    let corpus = corpus(out)?;
    for level in levels(cfg, only) {
        let plan = load_plan(out, cfg, level)?;
        let model = load_model(out, cfg, level, role)?;
        let mut utts: Vec<&Utterance> = Vec::new();
        let m = plan.split(role);
        for list in [&m.mi_train_pos, &m.mi_train_neg, &m.mi_test_pos, &m.mi_test_neg] {
            utts.extend(miaudit::synth::select(&corpus, list)?);
        }
        utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        utts.dedup_by(|a, b| a.utterance_id == b.utterance_id);
        let target = dir
            .clone()
            .unwrap_or_else(|| out.root.join("logits").join(format!("{}-{}", level.as_str(), role.as_str())));
        let n = export_logits(&model, &utts, &target, (!no_nbest).then_some(&cfg.features))?;
        println!("{} {}: {n} files in {}", level.as_str(), role.as_str(), target.display());
    }
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, out: &Layout) -> Result<()> {
    let start = std::time::Instant::now();
    let log = |msg: &str| eprintln!("[{:7.1}s] {msg}", start.elapsed().as_secs_f64());
    let run = run_experiment(cfg, &log)?;
    let corpus = gen_corpus(&cfg.corpus)?;
    out.ensure(&out.corpus())?;
    save_corpus(&out.corpus(), &corpus.utterances)?;
    for &level in &cfg.levels {
        let plan = plan_level(cfg, &corpus.utterances, level)?;
        for role in [Role::Shadow, Role::Target] {
            let p = out.split(level, role);
            out.ensure(&p)?;
            plan.split(role).save(&p)?;
        }
    }
    for (level, role, m) in &run.models {
        save_model(out, *level, *role, m)?;
    }
    for (level, set, seed, f) in &run.forests {
        save_forest(out, *level, *set, *seed, f)?;
    }
    save_report(out, &run.report)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli.global)?;
    let out = Layout {
        root: cli.global.out_dir.clone(),
    };
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::TrainAsr { role, level } => cmd_train_asr(&cfg, &out, role, level),
        Command::Extract { role, level } => cmd_extract(&cfg, &out, role, level),
        Command::TrainMi { level } => cmd_train_mi(&cfg, &out, level),
        Command::Evaluate => cmd_evaluate(&cfg, &out),
        Command::AuditExternal {
            logits_dir,
            manifest,
        } => {
            let m = SplitManifest::load(&manifest)?;
            let report = audit_external(&logits_dir, &m, &cfg)?;
            save_report(&out, &report)
        }
        Command::Report { path } => cmd_report(&out, path),
        Command::ExportLogits {
            role,
            level,
            dir,
            no_nbest,
        } => cmd_export(&cfg, &out, role, level, dir, no_nbest),
        Command::Run => cmd_run(&cfg, &out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
