mod svg;

use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use xmodal_core::codebook::{usage_stats, write_usage_csv};
use xmodal_core::gradsuite;
use xmodal_core::infotheory::verify_all;
use xmodal_core::jsonfmt;
use xmodal_core::synthdata::{generate_dataset, load_dataset, write_dataset, Dataset, SceneConfig};
use xmodal_core::train::{
    joint_usage, linear_probe, pretrain, run_ablation, write_metrics_csv, AblationRow, Checkpoint, ExperimentData, MetricsRow, ProbeConfig,
    TrainConfig,
};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal 2D/3D pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of paired scenes.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of scenes; overrides the configuration's.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Pretrain on a dataset; `--out` names a directory for the checkpoint and metrics.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Also draw the loss columns as an SVG chart.
        #[arg(long)]
        svg: bool,
    },
    /// Linear probe on frozen point latents.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled scenes for fitting the probe.
        #[arg(long)]
        train: PathBuf,
        /// Scenes for measuring accuracy.
        #[arg(long)]
        heldout: PathBuf,
    },
    /// Check the two information-theoretic statements on random joints.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Number of random cases.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        max_alphabet: Option<usize>,
    },
    /// Codebook usage from a checkpoint's counters, or measured on `--data`.
    CodebookStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Tape gradients against central differences for every operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train and probe the five ablation configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    seed: u64,
    n_scenes: usize,
    scene: SceneConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { seed: 0, n_scenes: 64, scene: SceneConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeFileConfig {
    probe: ProbeConfig,
}

impl Default for ProbeFileConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TheoryConfig {
    seed: u64,
    n_cases: usize,
    max_alphabet: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self { seed: 0, n_cases: 100, max_alphabet: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    seed: u64,
    trials: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 10 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateConfig {
    /// Root of the generated train, probe and held-out sets.
    data_seed: u64,
    n_train: usize,
    n_probe: usize,
    n_heldout: usize,
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
    scene: SceneConfig,
    train: TrainConfig,
    probe: ProbeConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            n_train: 64,
            n_probe: 64,
            n_heldout: 32,
            seeds: (0..5).collect(),
            rows: vec![AblationRow::Nce, AblationRow::Rec, AblationRow::Codebook, AblationRow::Geo, AblationRow::Kl],
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| format!("{}: {e}", p.display()))?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = jsonfmt::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Checkpoint::from_json(&bytes)?)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn metrics_chart(rows: &[MetricsRow]) -> String {
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    svg::line_chart(
        "pretraining losses per step",
        &[
            ("total", col(|r| r.total)),
            ("nce", col(|r| r.nce)),
            ("commit", col(|r| r.commit)),
            ("rec", col(|r| r.rec)),
            ("occ", col(|r| r.occ)),
            ("orth", col(|r| r.orth)),
        ],
    )
}

/// Runs one subcommand; `Ok(false)` means a check ran and failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Gen { common, scenes } => {
            let mut cfg: GenConfig = read_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.n_scenes = scenes.unwrap_or(cfg.n_scenes);
            let samples = generate_dataset(&cfg.scene, cfg.n_scenes, cfg.seed)?;
            emit(common.out.as_deref(), &write_dataset(&Dataset::new(cfg.scene, samples))?)?;
            Ok(true)
        }
        Command::Pretrain { common, data, svg } => {
            let mut cfg: TrainConfig = read_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let dir = common.out.ok_or("pretrain needs --out <directory>")?;
            let dataset = read_dataset(&data)?;
            let out = pretrain(&cfg, &dataset.scenes)?;
            fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            fs::write(dir.join("checkpoint.json"), out.checkpoint.to_json()?)?;
            write_metrics_csv(&out.metrics, fs::File::create(dir.join("metrics.csv"))?)?;
            if svg {
                fs::write(dir.join("metrics.svg"), metrics_chart(&out.metrics))?;
            }
            Ok(true)
        }
        Command::Probe { common, checkpoint, train, heldout } => {
            let mut cfg: ProbeFileConfig = read_config(common.config.as_deref())?;
            cfg.probe.seed = common.seed.unwrap_or(cfg.probe.seed);
            let ckpt = read_checkpoint(&checkpoint)?;
            let (train, heldout) = (read_dataset(&train)?, read_dataset(&heldout)?);
            let n_classes = train.config.n_classes().max(heldout.config.n_classes());
            let report = linear_probe(&ckpt.model()?, &ckpt.config, &train.scenes, &heldout.scenes, n_classes, &cfg.probe)?;
            emit(common.out.as_deref(), &json_line(&report)?)?;
            Ok(true)
        }
        Command::VerifyTheory { common, seeds, max_alphabet } => {
            let mut cfg: TheoryConfig = read_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.n_cases = seeds.unwrap_or(cfg.n_cases);
            cfg.max_alphabet = max_alphabet.unwrap_or(cfg.max_alphabet);
            let report = verify_all(cfg.n_cases, cfg.max_alphabet, cfg.seed)?;
            emit(common.out.as_deref(), &json_line(&report)?)?;
            Ok(report.passed)
        }
        Command::CodebookStats { common, checkpoint, data, format } => {
            let ckpt = read_checkpoint(&checkpoint)?;
            let book = ckpt.codebook.as_ref().ok_or("checkpoint has no codebook (quantization was disabled)")?;
            let stats = match data {
                None => usage_stats(book),
                Some(path) => {
                    let dataset = read_dataset(&path)?;
                    joint_usage(&ckpt.model()?, book, &ckpt.config, &dataset.scenes, common.seed.unwrap_or(ckpt.config.seed))?
                }
            };
            let bytes = match format {
                Format::Json => json_line(&stats)?,
                Format::Csv => {
                    let mut buf = Vec::new();
                    write_usage_csv(&stats, &mut buf)?;
                    buf
                }
            };
            emit(common.out.as_deref(), &bytes)?;
            Ok(true)
        }
        Command::Gradcheck { common, trials } => {
            let mut cfg: GradcheckConfig = read_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.trials = trials.unwrap_or(cfg.trials);
            let report = gradsuite::run(cfg.seed, cfg.trials)?;
            emit(common.out.as_deref(), &json_line(&report)?)?;
            Ok(report.iter().all(|r| r.passed))
        }
        Command::Ablate { common } => {
            let mut cfg: AblateConfig = read_config(common.config.as_deref())?;
            cfg.data_seed = common.seed.unwrap_or(cfg.data_seed);
            let data = ExperimentData::generate(&cfg.scene, cfg.n_train, cfg.n_probe, cfg.n_heldout, cfg.data_seed)?;
            let report = run_ablation(&cfg.train, &cfg.rows, &cfg.seeds, &data, &cfg.probe)?;
            emit(common.out.as_deref(), &json_line(&report)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
