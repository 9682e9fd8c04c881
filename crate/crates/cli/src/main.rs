//! `tbtnet` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tbtnet::episodes::{
    build_fold_split, open_dataset, read_manifest, test_pair_list, write_manifest, Dataset,
    EpisodeSampler, ManifestHeader, Partition,
};
use tbtnet::evaluation::{evaluate, EvalOptions};
use tbtnet::predict::{predict_files, write_prediction};
use tbtnet::train::checkpoint::{self, check_compatible};
use tbtnet::train::{load_model, RunConfig, Trainer, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "tbtnet", version, about = "Few-shot segmentation: train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes logs and checkpoints to the output dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a fixed test manifest.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate; generated from the seed when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Length of a generated manifest.
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Report path; defaults to `<output_dir>/report_<K>shot.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write predicted masks here.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Segment one query image given support images and masks.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Support image; repeat for K shots.
        #[arg(long = "support", required = true)]
        supports: Vec<PathBuf>,
        /// Support mask, one per --support, in the same order.
        #[arg(long = "support-mask", required = true)]
        support_masks: Vec<PathBuf>,
        /// Directory for the mask PNGs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the binarised layer 4, 3 and 2 predictions.
        #[arg(long)]
        intermediates: bool,
    },
    /// Print the learnable parameter count of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a deterministic test-episode manifest.
    Manifest {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run configuration sources. Precedence: flags, then the data-root
/// environment variable, then the config file, then the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    fold: Option<String>,
    /// Support images per episode (1 or 5 in the benchmarks).
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Dropout rate on the self-similarity branch.
    #[arg(long)]
    beta: Option<String>,
    /// `false` removes the self-similarity branch.
    #[arg(long)]
    bi_transformer: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    data_root: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        [
            ("backbone", &self.backbone),
            ("weights", &self.weights),
            ("dataset", &self.dataset),
            ("fold", &self.fold),
            ("shots", &self.shots),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("bi_transformer", &self.bi_transformer),
            ("seed", &self.seed),
            ("dim", &self.dim),
            ("image_size", &self.image_size),
            ("max_steps", &self.max_steps),
            ("data_root", &self.data_root),
            ("output_dir", &self.output_dir),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }

    /// Layer file, environment and flags over `base`.
    fn resolve(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        cfg.apply_env();
        for (k, v) in self.flags() {
            cfg.set(k, v).with_context(|| format!("--{}", k.replace('_', "-")))?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
            cfg.set(k, v).with_context(|| format!("--set {s}"))?;
        }
        Ok(cfg)
    }
}

fn print_config(cfg: &RunConfig) {
    eprintln!("configuration ({DATA_ROOT_ENV} overrides data_root):");
    for (k, v) in cfg.to_pairs() {
        eprintln!("  {k}={v}");
    }
}

fn open(cfg: &RunConfig) -> Result<Box<dyn Dataset>> {
    open_dataset(cfg.dataset, cfg.data_root.as_deref(), cfg.seed)
        .with_context(|| format!("cannot open dataset {}", cfg.dataset))
}

/// Checkpoint config with the user's overrides, refusing model mismatches.
fn checkpoint_config(dir: &Path, args: &ConfigArgs) -> Result<RunConfig> {
    let saved = checkpoint::load(dir)
        .with_context(|| format!("cannot load checkpoint {}", dir.display()))?
        .state
        .run_config()?;
    let cfg = args.resolve(saved.clone())?;
    check_compatible(&saved, &cfg)?;
    Ok(cfg)
}

fn train(config: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = match resume {
        Some(dir) => checkpoint_config(dir, config)?,
        None => config.resolve(RunConfig::default())?,
    };
    print_config(&cfg);
    cfg.validate()?;
    let dataset = open(&cfg)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, dataset.as_ref(), Some(cfg))?,
        None => Trainer::new(cfg, dataset.as_ref())?,
    };
    log::info!(
        "{} learnable parameters, {} steps per epoch",
        trainer.model().learnable_param_count(),
        trainer.steps_per_epoch()
    );
    let reports = trainer.run()?;
    if let Some(last) = reports.last() {
        println!(
            "finished epoch {} at step {}: mean loss {:.6}",
            last.epoch,
            trainer.step_count(),
            last.mean_loss
        );
    }
    println!("checkpoints in {}", trainer.output_dir().display());
    Ok(())
}

fn eval(
    config: &ConfigArgs,
    ckpt: &Path,
    manifest: Option<&Path>,
    episodes: usize,
    report: Option<&Path>,
    mask_dir: Option<PathBuf>,
) -> Result<()> {
    let cfg = checkpoint_config(ckpt, config)?;
    print_config(&cfg);
    cfg.validate()?;
    let (_, model) = load_model(ckpt, Some(&cfg))?;
    let dataset = open(&cfg)?;
    let split = build_fold_split(cfg.dataset, cfg.fold)?;
    let sampler = EpisodeSampler::new(
        dataset.as_ref(),
        split,
        Partition::Test,
        cfg.shots,
        cfg.image_size,
    )?;
    let entries = match manifest {
        Some(p) => read_manifest(p)?,
        None => {
            let list = test_pair_list(&sampler, cfg.seed, episodes)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(format!("manifest_{}shot.tsv", cfg.shots));
            write_manifest(&path, &manifest_header(&cfg), &list)?;
            log::info!("wrote manifest {}", path.display());
            list.into_iter().enumerate().map(|(i, d)| (i + 1, d)).collect()
        }
    };
    let opts = EvalOptions {
        shots: cfg.shots,
        mask_dir,
        keep_predictions: false,
    };
    let outcome = evaluate(&model, &sampler, &entries, &opts)?;
    let path = report.map_or_else(
        || cfg.output_dir.join(format!("report_{}shot.txt", cfg.shots)),
        Path::to_path_buf,
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome.report.write(&path)?;
    print!("{}", outcome.report.to_text());
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn manifest_header(cfg: &RunConfig) -> ManifestHeader {
    ManifestHeader {
        dataset: cfg.dataset.to_string(),
        fold: cfg.fold,
        shots: cfg.shots,
        seed: cfg.seed,
    }
}

fn predict(
    config: &ConfigArgs,
    ckpt: &Path,
    query: &Path,
    supports: &[PathBuf],
    masks: &[PathBuf],
    out: &Path,
    intermediates: bool,
) -> Result<()> {
    if supports.len() != masks.len() {
        bail!(
            "{} --support images but {} --support-mask files",
            supports.len(),
            masks.len()
        );
    }
    let cfg = checkpoint_config(ckpt, config)?;
    let (_, model) = load_model(ckpt, Some(&cfg))?;
    let pairs: Vec<(PathBuf, PathBuf)> = supports.iter().cloned().zip(masks.iter().cloned()).collect();
    let prediction = predict_files(&model, cfg.image_size, query, &pairs)?;
    let stem = query
        .file_stem()
        .map_or_else(|| "prediction".into(), |s| s.to_string_lossy().into_owned());
    for p in write_prediction(&prediction, out, &stem, intermediates)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn params(config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve(RunConfig::default())?;
    print_config(&cfg);
    let net = cfg.network_config().param_count();
    println!("backbone={} (frozen, 0 learnable)", cfg.backbone);
    println!("learnable_params={net}");
    Ok(())
}

fn manifest(config: &ConfigArgs, episodes: usize, out: &Path) -> Result<()> {
    let cfg = config.resolve(RunConfig::default())?;
    print_config(&cfg);
    cfg.validate()?;
    let dataset = open(&cfg)?;
    let split = build_fold_split(cfg.dataset, cfg.fold)?;
    let sampler = EpisodeSampler::new(
        dataset.as_ref(),
        split,
        Partition::Test,
        cfg.shots,
        cfg.image_size,
    )?;
    let list = test_pair_list(&sampler, cfg.seed, episodes)?;
    write_manifest(out, &manifest_header(&cfg), &list)?;
    println!("wrote {} episodes to {}", list.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            episodes,
            report,
            mask_dir,
        } => eval(
            &config,
            &checkpoint,
            manifest.as_deref(),
            episodes,
            report.as_deref(),
            mask_dir,
        ),
        Command::Predict {
            config,
            checkpoint,
            query,
            supports,
            support_masks,
            out,
            intermediates,
        } => predict(
            &config,
            &checkpoint,
            &query,
            &supports,
            &support_masks,
            &out,
            intermediates,
        ),
        Command::Params { config } => params(&config),
        Command::Manifest {
            config,
            episodes,
            out,
        } => manifest(&config, episodes, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
