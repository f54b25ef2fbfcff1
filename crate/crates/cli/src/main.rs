//! `csn`: synthetic data generation, training, cross-validation, merge
//! ablation, external scoring and gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csn_core::data::synth;
use csn_core::gradcheck::GradCheckOptions;
use csn_core::harness::{self, gradient, ExperimentConfig};
use csn_core::metrics::{build_report, reports_to_csv, PredictionSet};
use csn_core::siamese::{DetectionRule, MergePoint};
use csn_core::{Error, Task};

#[derive(Parser, Debug)]
#[command(name = "csn", version, about = "Calibrating Siamese networks for facial action units")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (manifest.csv + images.csnt).
    Synth,
    /// Train the models of one cross-validation fold and save checkpoints.
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Participant-exclusive cross-validation of every configured mode.
    Xval,
    /// One Siamese variant per merge point.
    Ablate {
        /// Comma-separated merge points; defaults to `ablate.merges`.
        #[arg(long, value_delimiter = ',')]
        merges: Option<Vec<String>>,
    },
    /// Metrics for an external `participant,frame,au,label,prediction` CSV.
    Score {
        predictions: PathBuf,
        #[arg(long, default_value = "intensity")]
        task: String,
        #[arg(long, default_value = "external")]
        method: String,
        #[arg(long, value_enum, default_value_t = Rule::AtLeast)]
        rule: Rule,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference gradient check of the full network.
    Gradcheck {
        /// Comma-separated Siamese merge points checked besides the plain
        /// backbone.
        #[arg(long, value_delimiter = ',', default_value = "stage4,output")]
        merges: Vec<String>,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rule {
    /// Occurrence iff score >= threshold.
    AtLeast,
    /// Occurrence iff score > threshold.
    Above,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn parse_merges(items: &[String]) -> Result<Vec<MergePoint>, Failure> {
    items.iter().map(|s| s.parse().map_err(Failure::Run)).collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Run(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let s = cfg
                .synth_config()
                .ok_or_else(|| Failure::Usage("synth needs a synthetic data source".into()))?;
            let data = synth::generate(&s)?;
            let path = synth::write(&data, &out_dir(&cfg, "csn-data"))?;
            println!("{}", path.display());
        }
        Command::Train { fold } => {
            cfg.validate()?;
            let data = harness::load_data(&cfg)?;
            let spec = harness::backbone_for(&cfg, &data)?;
            let folds = csn_core::data::make_folds(&data.manifest, cfg.folds, cfg.seed)?;
            if fold >= folds.k {
                return Err(Failure::Usage(format!("--fold {fold} out of 0..{}", folds.k)));
            }
            let models = harness::train_fold(&cfg, &spec, &data, &folds, fold)?;
            let dir = out_dir(&cfg, "csn-out");
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            if let Some(p) = &models.plain {
                harness::save_checkpoint(&dir.join(format!("fold{fold}_plain.csnt")), p)?;
            }
            for (m, p) in &models.csn {
                harness::save_checkpoint(&dir.join(format!("fold{fold}_csn_{m}.csnt")), p)?;
            }
            let log = serde_json::to_string_pretty(&models.logs).map_err(Error::from)?;
            write_file(&dir.join(format!("fold{fold}_train_log.json")), &log)?;
            for l in &models.logs {
                let losses: Vec<String> = l.epochs.iter().map(|e| format!("{:.4}", e.mean_loss)).collect();
                println!("{} epoch losses: {}", l.model, losses.join(" "));
            }
        }
        Command::Xval => {
            let data = harness::load_data(&cfg)?;
            let result = harness::run_crossval(&cfg, &data)?;
            result.write(&out_dir(&cfg, "csn-out"))?;
            print!("{}", result.to_csv());
        }
        Command::Ablate { merges } => {
            let merges = match merges {
                Some(m) => parse_merges(&m)?,
                None => cfg.ablate_merges.clone(),
            };
            let data = harness::load_data(&cfg)?;
            let result = harness::run_ablation(&cfg, &data, &merges)?;
            result.write(&out_dir(&cfg, "csn-out"))?;
            print!("{}", result.to_csv());
        }
        Command::Score {
            predictions,
            task,
            method,
            rule,
            threshold,
        } => {
            let task: Task = task.parse()?;
            let text = std::fs::read_to_string(&predictions).map_err(|e| Error::Io {
                path: predictions.clone(),
                source: e,
            })?;
            let set = PredictionSet::from_csv(&text, &predictions.display().to_string())?;
            let rule = match rule {
                Rule::AtLeast => DetectionRule::AtLeast(threshold),
                Rule::Above => DetectionRule::Above(threshold),
            };
            let report = build_report(&method, task, &[set], Some(rule))?;
            print!("{}", reports_to_csv(&[report]));
        }
        Command::Gradcheck { merges, coords, batch } => {
            let (size, aus) = cfg.synth_config().map_or((32, 6), |s| (s.image_size, s.num_aus));
            let spec = cfg.backbone((1, size, size), aus)?;
            let opts = GradCheckOptions {
                max_coords_per_tensor: Some(coords),
                seed: cfg.seed,
                ..Default::default()
            };
            let mut report = gradient::check_network(&spec, None, batch, &opts)?;
            for m in parse_merges(&merges)? {
                report.merge(gradient::check_network(&spec, Some(m), batch, &opts)?);
            }
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Numerical(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
