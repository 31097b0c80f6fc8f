use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mi_embed::attack::{infer_user, train_attack, AttackModel, FeatureMode};
use mi_embed::baseline::{self, AugmentationSpec, KnowledgeMode};
use mi_embed::dataset::{self, clusters_from_map, MembershipSplit, SplitManifest, UserCluster};
use mi_embed::embedding::{train_encoder, Encoder, TrainingConfig};
use mi_embed::features::extract_features;
use mi_embed::harness::{self, ExperimentConfig, ReportFormat};
use mi_embed::rng;
use mi_embed::shadow::{build_shadow_splits, run_shadows, AttackDataset};
use mi_embed::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mi-embed",
    version,
    about = "User-level membership inference against metric embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic user clusters; optionally write a victim/attacker split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Writes victim_train.csv, probe.csv, shadow_pool.csv and split.json here.
        #[arg(long)]
        split_dir: Option<PathBuf>,
    },
    /// Train a victim encoder on every sample in --data.
    TrainVictim {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train shadow encoders on a pool and emit the attack dataset.
    TrainShadows {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the membership classifier on an attack dataset.
    TrainAttack {
        #[arg(long)]
        attack_dataset: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        features: Features,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Issue user-level verdicts for every user in --data.
    Infer {
        #[arg(long)]
        attack_model: PathBuf,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Augmentation-consistency baseline with majority voting.
    BaselineEncodermi {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        shadow_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run an experiment grid and write the structured report.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a structured report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    C,
    P,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Unknown,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_part(clusters: &[UserCluster], dim: usize, path: &Path) -> Result<()> {
    if clusters.is_empty() {
        let file = fs::File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        return dataset::write_empty_csv(dim, file);
    }
    dataset::save_csv(clusters, path)
}

fn gen_data(config: &Option<PathBuf>, seed: Option<u64>, out: &Path, split_dir: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = dataset::generate_synthetic(&cfg.data.synthetic, rng::derive_tagged(cfg.seed, "data"))?;
    dataset::save_csv(&data, out)?;
    if let Some(dir) = split_dir {
        create_dir(dir)?;
        let split = dataset::partition(
            &data,
            cfg.split.members,
            cfg.split.nonmembers,
            cfg.split.within_user_split,
            rng::derive_tagged(cfg.seed, "split"),
        )?;
        let dim = cfg.data.synthetic.dim;
        save_part(
            &clusters_from_map(&split.training_members),
            dim,
            &dir.join("victim_train.csv"),
        )?;
        let mut probe = clusters_from_map(&split.nontraining_members);
        probe.extend(clusters_from_map(&split.nonmembers));
        save_part(&probe, dim, &dir.join("probe.csv"))?;
        save_part(&split.shadow_clusters(), dim, &dir.join("shadow_pool.csv"))?;
        split.manifest().save(&dir.join("split.json"))?;
    }
    Ok(())
}

fn train_victim(data: &Path, config: &Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let clusters = dataset::load_csv(data)?;
    let samples = clusters.into_iter().map(|c| (c.user_id, c.samples)).collect();
    let training = TrainingConfig {
        seed: cfg.seed,
        ..cfg.victim.clone()
    };
    let encoder = train_encoder("victim", &samples, &training)?;
    encoder.save(out)
}

fn train_shadows(pool: &Path, config: &Option<PathBuf>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let clusters = dataset::load_csv(pool)?;
    let shadow_cfg = cfg.shadow_config(cfg.seed);
    let splits = build_shadow_splits(&clusters, &shadow_cfg)?;
    let (encoders, attack_data) = harness::with_worker_pool(|| run_shadows(&splits, &shadow_cfg))??;
    create_dir(out_dir)?;
    for (i, (enc, split)) in encoders.iter().zip(&splits).enumerate() {
        enc.save(&out_dir.join(format!("shadow_{i}.json")))?;
        split.manifest().save(&out_dir.join(format!("split_{i}.json")))?;
    }
    dataset::save_csv(&clusters, &out_dir.join("pool.csv"))?;
    let file = fs::File::create(out_dir.join("attack_dataset.csv")).map_err(|e| Error::Io {
        path: out_dir.join("attack_dataset.csv"),
        source: e,
    })?;
    attack_data.write_csv(file)
}

fn train_attack_cmd(
    attack_dataset: &Path,
    features: Features,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let file = fs::File::open(attack_dataset).map_err(|e| Error::Io {
        path: attack_dataset.to_path_buf(),
        source: e,
    })?;
    let data = AttackDataset::read_csv(file)?;
    let mode = match features {
        Features::C => FeatureMode::COnly,
        Features::P => FeatureMode::POnly,
        Features::Both => FeatureMode::Both,
    };
    train_attack(&data, mode, &cfg.attack.hyper(), cfg.seed)?.save(out)
}

fn infer(attack_model: &Path, victim: &Path, data: &Path, k: usize, seed: u64, report: &Path) -> Result<()> {
    let model = AttackModel::load(attack_model)?;
    let victim = Encoder::load(victim)?;
    let mut wtr = csv::Writer::from_path(report).map_err(|e| Error::Config(e.to_string()))?;
    wtr.write_record(["user_id", "encoder_id", "k_used", "c_u", "p_u", "label", "score"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for cluster in dataset::load_csv(data)? {
        let user_seed = rng::derive_tagged(seed, &cluster.user_id.0);
        let f = extract_features(&victim, &cluster, k, user_seed)?;
        let v = infer_user(&model, &victim, &cluster, k, user_seed)?;
        let label = if v.member { "member" } else { "nonmember" };
        wtr.write_record([
            f.user_id.0.clone(),
            f.encoder_id.clone(),
            f.k_used.to_string(),
            format!("{:?}", f.c_u),
            format!("{:?}", f.p_u),
            label.to_string(),
            format!("{:?}", v.score),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })
}

/// Shadow encoders with their splits, as written by `train-shadows`.
fn load_shadows(dir: &Path) -> Result<Vec<(Encoder, MembershipSplit)>> {
    let pool = dataset::load_csv(&dir.join("pool.csv"))?;
    let mut out = Vec::new();
    for i in 0.. {
        let ckpt = dir.join(format!("shadow_{i}.json"));
        if !ckpt.exists() {
            break;
        }
        let split = SplitManifest::load(&dir.join(format!("split_{i}.json")))?.resolve(&pool)?;
        out.push((Encoder::load(&ckpt)?, split));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no shadow checkpoints in {}", dir.display())));
    }
    Ok(out)
}

fn baseline_cmd(
    victim: &Path,
    data: &Path,
    mode: Mode,
    shadow_dir: &Path,
    n_views: usize,
    seed: u64,
    report: &Path,
) -> Result<()> {
    let victim = Encoder::load(victim)?;
    let mode = match mode {
        Mode::Full => KnowledgeMode::FullKnowledge,
        Mode::Unknown => KnowledgeMode::UnknownAugmentations,
    };
    let spec = AugmentationSpec::for_victim(&victim, mode, n_views);
    let mut shadow_users = Vec::new();
    for (enc, split) in load_shadows(shadow_dir)? {
        for (part, is_member) in [(&split.nontraining_members, true), (&split.nonmembers, false)] {
            for cluster in clusters_from_map(part) {
                shadow_users.push((baseline::user_scores(&enc, &cluster, &spec, seed)?, is_member));
            }
        }
    }
    let threshold = baseline::fit_threshold(&shadow_users)?;
    let mut wtr = csv::Writer::from_path(report).map_err(|e| Error::Config(e.to_string()))?;
    wtr.write_record([
        "user_id",
        "encoder_id",
        "label",
        "member_votes",
        "n_samples",
        "threshold",
    ])
    .map_err(|e| Error::Config(e.to_string()))?;
    for cluster in dataset::load_csv(data)? {
        let scores = baseline::user_scores(&victim, &cluster, &spec, seed)?;
        let votes = scores.iter().filter(|&&s| s > threshold).count();
        let label = if baseline::verdict_from_scores(&scores, threshold) {
            "member"
        } else {
            "nonmember"
        };
        wtr.write_record([
            cluster.user_id.0.clone(),
            victim.id.clone(),
            label.to_string(),
            votes.to_string(),
            scores.len().to_string(),
            format!("{threshold:?}"),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            split_dir,
        } => gen_data(&config, seed, &out, &split_dir)?,
        Command::TrainVictim {
            data,
            config,
            seed,
            out,
        } => train_victim(&data, &config, seed, &out)?,
        Command::TrainShadows {
            pool,
            config,
            seed,
            out_dir,
        } => train_shadows(&pool, &config, seed, &out_dir)?,
        Command::TrainAttack {
            attack_dataset,
            features,
            config,
            seed,
            out,
        } => train_attack_cmd(&attack_dataset, features, &config, seed, &out)?,
        Command::Infer {
            attack_model,
            victim,
            data,
            k,
            seed,
            report,
        } => infer(&attack_model, &victim, &data, k, seed, &report)?,
        Command::BaselineEncodermi {
            victim,
            data,
            mode,
            shadow_dir,
            n_views,
            seed,
            report,
        } => baseline_cmd(&victim, &data, mode, &shadow_dir, n_views, seed, &report)?,
        Command::Experiment { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let report = harness::run_experiment(&cfg)?;
            write(&out, harness::report_render(&report, ReportFormat::Json)?)?;
            print!("{}", harness::report_render(&report, ReportFormat::Table)?);
            return Ok(report.complete);
        }
        Command::Report { input, format, out } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = harness::parse_report(&text)?;
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Json => ReportFormat::Json,
            };
            let rendered = harness::report_render(&report, format)?;
            match out {
                Some(path) => write(&path, rendered)?,
                None => print!("{rendered}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more repeats were aborted");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
