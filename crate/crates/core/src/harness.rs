//! Experiment grid, binary metrics with repeat statistics, and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{train_attack, AttackHyperParams, AttackModel, FeatureMode};
use crate::baseline::{self, AugmentationSpec, KnowledgeMode};
use crate::dataset::{self, clusters_from_map, MembershipSplit, SyntheticParams, UserCluster, UserId, UserSamples};
use crate::embedding::{train_encoder, Encoder, TrainingConfig};
use crate::error::{Error, Result};
use crate::features::extract_from_samples;
use crate::rng;
use crate::shadow::{
    build_shadow_splits, mix_training_access, rebuild_dataset, run_shadows, AttackDataset, ShadowConfig,
};

/// Environment variable holding the worker-pool size for shadow training.
pub const WORKERS_ENV: &str = "MI_EMBED_WORKERS";

pub const SWEEP_PROPORTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const RECALL_GROUPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Main,
    TrainingAccessSweep,
    Ablation,
    GroupRecall,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// When set, samples are read from this CSV instead of generated.
    pub csv: Option<PathBuf>,
    pub synthetic: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub members: usize,
    pub nonmembers: usize,
    pub within_user_split: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            members: 40,
            nonmembers: 40,
            within_user_split: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowSettings {
    pub n_shadows: usize,
    pub member_users: usize,
    pub nonmember_users: usize,
}

impl Default for ShadowSettings {
    fn default() -> Self {
        Self {
            n_shadows: 10,
            member_users: 40,
            nonmember_users: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub feature_mode: FeatureMode,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let hp = AttackHyperParams::default();
        Self {
            feature_mode: FeatureMode::Both,
            hidden: hp.hidden,
            epochs: hp.epochs,
            lr: hp.lr,
            momentum: hp.momentum,
        }
    }
}

impl AttackSettings {
    pub fn hyper(&self) -> AttackHyperParams {
        AttackHyperParams {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub enabled: bool,
    pub n_views: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            n_views: 8,
        }
    }
}

/// Full experiment description; every field has a desk-scale default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub repeats: usize,
    pub seed: u64,
    /// Samples per user used for the compactness features.
    pub k: usize,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub victim: TrainingConfig,
    pub shadow: ShadowSettings,
    pub attack: AttackSettings,
    pub baseline: BaselineSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Main,
            repeats: 5,
            seed: 0,
            k: 10,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            victim: TrainingConfig {
                epochs: 200,
                ..TrainingConfig::default()
            },
            shadow: ShadowSettings::default(),
            attack: AttackSettings::default(),
            baseline: BaselineSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("k must be >= 2".into()));
        }
        if let Some(path) = &self.data.csv {
            if !path.exists() {
                return Err(Error::Config(format!("data file {} does not exist", path.display())));
            }
        }
        self.victim.validate()?;
        self.shadow_config(0).validate()
    }

    pub fn repeat_seeds(&self) -> Vec<u64> {
        (0..self.repeats).map(|r| rng::derive(self.seed, r as u64)).collect()
    }

    /// Shadow settings for one repeat; shadows share the victim architecture.
    pub fn shadow_config(&self, repeat_seed: u64) -> ShadowConfig {
        ShadowConfig {
            n_shadows: self.shadow.n_shadows,
            member_users: self.shadow.member_users,
            nonmember_users: self.shadow.nonmember_users,
            within_user_split: self.split.within_user_split,
            k: self.k,
            training_access: 0.0,
            master_seed: rng::derive_tagged(repeat_seed, "shadows"),
            training: self.victim.clone(),
        }
    }
}

/// Runs `f` on a rayon pool sized by [`WORKERS_ENV`], or the global pool.
pub fn with_worker_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(WORKERS_ENV).ok().filter(|v| !v.is_empty()) {
        None => Ok(f()),
        Some(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a count")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Percentages in [0, 100]; `None` where the denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

/// Binary metrics with member as the positive class.
pub fn evaluate(verdicts: &[bool], truth: &[bool]) -> Result<Metrics> {
    if verdicts.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty verdict list".into()));
    }
    if verdicts.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: verdicts.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&v, &t) in verdicts.iter().zip(truth) {
        match (v, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    Ok(Metrics {
        accuracy: pct(tp + tn, verdicts.len()),
        precision: pct(tp, tp + fp),
        recall: pct(tp, tp + fn_),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    })
}

/// Mean and sample standard deviation over the repeats where a value exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: None,
                std: None,
                n: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            n: v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    /// Indexed by repeat; `None` where the repeat failed.
    pub per_repeat: Vec<Option<Metrics>>,
    pub accuracy: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub complete: bool,
}

impl CellReport {
    fn from_repeats(name: String, per_repeat: Vec<Option<Metrics>>) -> Self {
        let pick = |f: fn(&Metrics) -> Option<f64>| Aggregate::of(per_repeat.iter().flatten().filter_map(f));
        Self {
            accuracy: pick(|m| m.accuracy),
            precision: pick(|m| m.precision),
            recall: pick(|m| m.recall),
            complete: per_repeat.iter().all(Option::is_some),
            name,
            per_repeat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
    pub failures: Vec<RepeatFailure>,
    pub complete: bool,
}

impl MetricsReport {
    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// Verdict lists of one repeat, keyed by cell name.
type RepeatCells = Vec<(String, Metrics)>;

struct RepeatContext {
    split: MembershipSplit,
    victim: Encoder,
    shadow_cfg: ShadowConfig,
    shadow_splits: Vec<MembershipSplit>,
    shadow_encoders: Vec<Encoder>,
    shadow_data: AttackDataset,
    seed: u64,
}

fn load_data(
    config: &ExperimentConfig,
    repeat_seed: u64,
    cached: &Option<Vec<UserCluster>>,
) -> Result<Vec<UserCluster>> {
    match cached {
        Some(data) => Ok(data.clone()),
        None => dataset::generate_synthetic(&config.data.synthetic, rng::derive_tagged(repeat_seed, "data")),
    }
}

fn prepare(config: &ExperimentConfig, data: &[UserCluster], seed: u64) -> Result<RepeatContext> {
    let split = dataset::partition(
        data,
        config.split.members,
        config.split.nonmembers,
        config.split.within_user_split,
        rng::derive_tagged(seed, "split"),
    )?;
    let victim_cfg = TrainingConfig {
        seed: rng::derive_tagged(seed, "victim"),
        ..config.victim.clone()
    };
    let victim = train_encoder("victim", &split.training_members, &victim_cfg)?;
    let shadow_cfg = config.shadow_config(seed);
    let shadow_splits = build_shadow_splits(&split.shadow_clusters(), &shadow_cfg)?;
    let (shadow_encoders, shadow_data) = run_shadows(&shadow_splits, &shadow_cfg)?;
    Ok(RepeatContext {
        split,
        victim,
        shadow_cfg,
        shadow_splits,
        shadow_encoders,
        shadow_data,
        seed,
    })
}

/// Attack verdicts on the victim's evaluation users: members probed with
/// the training-access mix, non-members with `k` of their samples.
fn attack_victim(
    model: &AttackModel,
    ctx: &RepeatContext,
    k: usize,
    training_access: f64,
) -> Result<Vec<(UserId, bool, bool)>> {
    let seed = rng::derive_tagged(ctx.seed, "victim-features");
    let member_pools = mix_training_access(&ctx.split, training_access, k, rng::derive_tagged(seed, "mix"))?;
    let mut out = Vec::with_capacity(member_pools.len() + ctx.split.nonmembers.len());
    for (is_member, pools) in [(true, &member_pools), (false, &ctx.split.nonmembers)] {
        for (user, samples) in pools {
            let f = extract_from_samples(&ctx.victim, user, samples, k, rng::derive_tagged(seed, &user.0))?;
            out.push((user.clone(), model.classify(&f)?.member, is_member));
        }
    }
    Ok(out)
}

fn metrics_of(rows: &[(UserId, bool, bool)]) -> Result<Metrics> {
    let verdicts: Vec<bool> = rows.iter().map(|r| r.1).collect();
    let truth: Vec<bool> = rows.iter().map(|r| r.2).collect();
    evaluate(&verdicts, &truth)
}

fn baseline_metrics(config: &ExperimentConfig, ctx: &RepeatContext, mode: KnowledgeMode) -> Result<Metrics> {
    let spec = AugmentationSpec::for_victim(&ctx.victim, mode, config.baseline.n_views);
    let seed = rng::derive_tagged(ctx.seed, "baseline");

    // Attacker-side samples: non-training members and non-members, as in the attack.
    let probe = |split: &MembershipSplit| -> Vec<(UserCluster, bool)> {
        let members = clusters_from_map(&split.nontraining_members)
            .into_iter()
            .map(|c| (c, true));
        let nonmembers = clusters_from_map(&split.nonmembers).into_iter().map(|c| (c, false));
        members.chain(nonmembers).collect()
    };

    let mut shadow_users = Vec::new();
    for (enc, split) in ctx.shadow_encoders.iter().zip(&ctx.shadow_splits) {
        for (cluster, is_member) in probe(split) {
            shadow_users.push((baseline::user_scores(enc, &cluster, &spec, seed)?, is_member));
        }
    }
    let threshold = baseline::fit_threshold(&shadow_users)?;

    let mut verdicts = Vec::new();
    let mut truth = Vec::new();
    for (cluster, is_member) in probe(&ctx.split) {
        verdicts.push(baseline::user_verdict(&ctx.victim, &cluster, &spec, threshold, seed)?);
        truth.push(is_member);
    }
    evaluate(&verdicts, &truth)
}

/// Quantile groups of member users by training-sample count, smallest first.
/// Users are ranked by count (ties by user id) and cut into equal-size runs.
pub fn recall_groups(training: &UserSamples, groups: usize) -> Vec<Vec<UserId>> {
    let mut ranked: Vec<(usize, &UserId)> = training.iter().map(|(u, s)| (s.len(), u)).collect();
    ranked.sort();
    let n = ranked.len();
    (0..groups)
        .map(|g| {
            ranked[g * n / groups..(g + 1) * n / groups]
                .iter()
                .map(|(_, u)| (*u).clone())
                .collect()
        })
        .collect()
}

pub fn cell_names(kind: ExperimentKind, baseline: bool) -> Vec<String> {
    match kind {
        ExperimentKind::Main => {
            let mut names = vec!["attack".to_string()];
            if baseline {
                names.push("encodermi_unknown".into());
                names.push("encodermi_full".into());
            }
            names
        }
        ExperimentKind::TrainingAccessSweep => SWEEP_PROPORTIONS
            .iter()
            .map(|p| format!("proportion_{}", (p * 100.0).round() as u32))
            .collect(),
        ExperimentKind::Ablation => [FeatureMode::COnly, FeatureMode::POnly, FeatureMode::Both]
            .iter()
            .map(|m| m.name().to_string())
            .collect(),
        ExperimentKind::GroupRecall => (1..=RECALL_GROUPS).map(|g| format!("group_{g}")).collect(),
    }
}

fn run_repeat(config: &ExperimentConfig, data: &[UserCluster], seed: u64) -> Result<RepeatCells> {
    let ctx = prepare(config, data, seed)?;
    let attack_seed = rng::derive_tagged(seed, "attack");
    let hp = &config.attack.hyper();
    let mut cells = Vec::new();
    match config.experiment {
        ExperimentKind::Main => {
            let model = train_attack(&ctx.shadow_data, config.attack.feature_mode, hp, attack_seed)?;
            cells.push((
                "attack".into(),
                metrics_of(&attack_victim(&model, &ctx, config.k, 0.0)?)?,
            ));
            if config.baseline.enabled {
                cells.push((
                    "encodermi_unknown".into(),
                    baseline_metrics(config, &ctx, KnowledgeMode::UnknownAugmentations)?,
                ));
                cells.push((
                    "encodermi_full".into(),
                    baseline_metrics(config, &ctx, KnowledgeMode::FullKnowledge)?,
                ));
            }
        }
        ExperimentKind::Ablation => {
            for mode in [FeatureMode::COnly, FeatureMode::POnly, FeatureMode::Both] {
                let model = train_attack(&ctx.shadow_data, mode, hp, attack_seed)?;
                cells.push((
                    mode.name().into(),
                    metrics_of(&attack_victim(&model, &ctx, config.k, 0.0)?)?,
                ));
            }
        }
        ExperimentKind::TrainingAccessSweep => {
            for (name, &p) in cell_names(config.experiment, false).into_iter().zip(&SWEEP_PROPORTIONS) {
                let data = if p == 0.0 {
                    ctx.shadow_data.clone()
                } else {
                    rebuild_dataset(&ctx.shadow_encoders, &ctx.shadow_splits, &ctx.shadow_cfg, p)?
                };
                let model = train_attack(&data, config.attack.feature_mode, hp, attack_seed)?;
                cells.push((name, metrics_of(&attack_victim(&model, &ctx, config.k, p)?)?));
            }
        }
        ExperimentKind::GroupRecall => {
            let model = train_attack(&ctx.shadow_data, config.attack.feature_mode, hp, attack_seed)?;
            let rows = attack_victim(&model, &ctx, config.k, 0.0)?;
            let by_user: BTreeMap<&UserId, &(UserId, bool, bool)> =
                rows.iter().filter(|r| r.2).map(|r| (&r.0, r)).collect();
            for (g, users) in recall_groups(&ctx.split.training_members, RECALL_GROUPS)
                .iter()
                .enumerate()
            {
                let group: Vec<(UserId, bool, bool)> = users.iter().map(|u| by_user[u].clone()).collect();
                cells.push((format!("group_{}", g + 1), metrics_of(&group)?));
            }
        }
    }
    Ok(cells)
}

/// Runs every repeat with fresh data, splits and seeds. A failing repeat is
/// recorded and leaves its cells empty; the report is then incomplete.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let cached = match &config.data.csv {
        Some(path) => Some(dataset::load_csv(path)?),
        None => None,
    };
    let seeds = config.repeat_seeds();
    let names = cell_names(config.experiment, config.baseline.enabled);
    let mut per_cell: Vec<Vec<Option<Metrics>>> = vec![vec![None; seeds.len()]; names.len()];
    let mut failures = Vec::new();

    for (r, &seed) in seeds.iter().enumerate() {
        let outcome =
            load_data(config, seed, &cached).and_then(|data| with_worker_pool(|| run_repeat(config, &data, seed))?);
        match outcome {
            Ok(cells) => {
                for (name, m) in cells {
                    let idx = names.iter().position(|n| *n == name).expect("known cell");
                    per_cell[idx][r] = Some(m);
                }
            }
            Err(e) => failures.push(RepeatFailure {
                repeat: r,
                error: e.to_string(),
            }),
        }
    }

    let cells: Vec<CellReport> = names
        .into_iter()
        .zip(per_cell)
        .map(|(name, reps)| CellReport::from_repeats(name, reps))
        .collect();
    Ok(MetricsReport {
        experiment: config.experiment,
        config: config.clone(),
        seeds,
        complete: failures.is_empty() && cells.iter().all(|c| c.complete),
        cells,
        failures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// Structured JSON, parseable by [`parse_report`].
    Json,
    /// Human-readable table with two-decimal percentages.
    Table,
}

pub fn report_render(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Table => Ok(render_table(report)),
    }
}

pub fn parse_report(text: &str) -> Result<MetricsReport> {
    Ok(serde_json::from_str(text)?)
}

fn fmt_aggregate(a: &Aggregate) -> String {
    match (a.mean, a.std) {
        (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
        _ => "n/a".to_string(),
    }
}

fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let kind = serde_json::to_value(report.experiment)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let _ = writeln!(out, "experiment: {kind}");
    let _ = writeln!(out, "repeats: {}  seeds: [{}]", report.seeds.len(), seeds.join(", "));
    let _ = writeln!(
        out,
        "{:<20} {:>16} {:>16} {:>16}",
        "cell", "accuracy", "precision", "recall"
    );
    for c in &report.cells {
        let mark = if c.complete { "" } else { " (incomplete)" };
        let _ = writeln!(
            out,
            "{:<20} {:>16} {:>16} {:>16}{mark}",
            c.name,
            fmt_aggregate(&c.accuracy),
            fmt_aggregate(&c.precision),
            fmt_aggregate(&c.recall)
        );
    }
    for f in &report.failures {
        let _ = writeln!(out, "repeat {} failed: {}", f.repeat, f.error);
    }
    out
}
