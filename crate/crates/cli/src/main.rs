//! `tlnlab`: build, fine-tune and analyze transfer-learning networks.

mod commands;
mod config;
mod import;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlnlab::nn::arch::Architecture;
use tlnlab::sweep::{InitMode, VariantSpec};
use tlnlab::synth::SynthSpec;
use tlnlab::tln::{parse_tln, NormScheme};
use tlnlab::tsne::TsneConfig;

use crate::commands::Mismatch;
use crate::config::{
    config_error, existing, ConfigError, ExperimentConfig, Preset, TrainSettings, VariantEntry,
};
use crate::manifest::{ChiSource, RunSpec};

const DEFAULT_OUT: &str = "runs";

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_TRAINING: u8 = 5;
const EXIT_MISMATCH: u8 = 6;

#[derive(Parser)]
#[command(
    name = "tlnlab",
    version,
    about = "Transfer-learning networks on a small autodiff core"
)]
struct Cli {
    /// Directory that receives the outputs and manifest.json
    /// [default: the config's `out_dir`, else `runs`].
    #[arg(long, global = true, env = "TLN_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset.
    Synth(SynthArgs),
    /// Convert a folder of class subfolders with images into a dataset.
    Import(ImportArgs),
    /// Train a source network on a dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune one TLN on a target dataset.
    Finetune(FinetuneArgs),
    /// Run the layer-wise fine-tuning sweep.
    Sweep(SweepArgs),
    /// Embed tapped features of one or more datasets with t-SNE.
    Tsne(TsneArgs),
    /// Render gain tables and accuracy curves from sweep results.
    Report(ReportArgs),
    /// Replay a manifest and verify every output digest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for initialization, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Training budget preset [default: desk].
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Minibatch iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Samples per minibatch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// Disable crop/flip augmentation.
    #[arg(long)]
    no_augment: bool,
}

impl TrainArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn settings(&self, file: &ExperimentConfig) -> TrainSettings {
        let flags = TrainSettings {
            preset: Preset::Desk,
            iterations: self.iterations,
            batch_size: self.batch_size,
            base_lr: self.lr,
            momentum: self.momentum,
            augment: self.no_augment.then_some(false),
            ..Default::default()
        };
        file.train.merge(&flags, self.preset)
    }

    fn seed(&self, file: &ExperimentConfig) -> u64 {
        self.seed.or(file.seed).unwrap_or(0)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// `source` (8 shapes) or `target` (4 other shapes).
    #[arg(long, default_value = "source")]
    kind: String,
    /// Dataset name recorded in meta.json.
    #[arg(long)]
    name: Option<String>,
    /// Index of the first shape in the catalogue.
    #[arg(long)]
    first_class: Option<usize>,
    /// Number of shape classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Image height and width in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Color channels.
    #[arg(long)]
    channels: Option<usize>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportArgs {
    /// Folder with one subfolder of images per class.
    #[arg(long)]
    input: PathBuf,
    /// Dataset name recorded in meta.json.
    #[arg(long)]
    name: String,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// 1 for grayscale, 3 for RGB.
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// Source dataset directory.
    #[arg(long)]
    source: Option<PathBuf>,
    /// `toy-alexnet` or `toy-vgg` [default: toy-alexnet].
    #[arg(long)]
    arch: Option<Architecture>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct VariantArgs {
    /// TLN notation, e.g. `[chi]_N-5^psi`.
    #[arg(long)]
    tln: Option<String>,
    /// Comma-separated widths of appended layers.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Normalization before appended layers: `std` or `l2`.
    #[arg(long)]
    norm: Option<NormScheme>,
    /// `pretrained`, or `scratch` to redraw transferred units.
    #[arg(long)]
    init: Option<InitMode>,
    /// Variant label used in outputs [default: cli].
    #[arg(long)]
    name: Option<String>,
}

impl VariantArgs {
    fn variant(&self) -> anyhow::Result<Option<VariantSpec>> {
        let Some(text) = &self.tln else {
            return Ok(None);
        };
        let notation = parse_tln(text).map_err(|e| config_error(format!("--tln: {e}")))?;
        Ok(Some(VariantSpec {
            name: self.name.clone().unwrap_or_else(|| "cli".into()),
            notation,
            sizes: self.sizes.clone(),
            norm: self.norm.unwrap_or(NormScheme::BatchStd),
            dropout: 0.0,
            init: self.init.unwrap_or_default(),
        }))
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Source network archive.
    #[arg(long)]
    chi: Option<PathBuf>,
    /// Target dataset directory.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Fraction of each class used for training.
    #[arg(long)]
    split: Option<f64>,
    #[command(flatten)]
    variant: VariantArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Source network archive.
    #[arg(long)]
    chi: Option<PathBuf>,
    /// Source dataset, pretrained first when no --chi is given.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Architecture used when pretraining from --source.
    #[arg(long)]
    arch: Option<Architecture>,
    /// Target dataset directory (repeatable).
    #[arg(long = "target")]
    targets: Vec<PathBuf>,
    /// Fraction of each class used for training.
    #[arg(long)]
    split: Option<f64>,
    /// Repeats per setup, each with its own seeds.
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated subset of setups to run.
    #[arg(long, value_delimiter = ',')]
    nus: Vec<usize>,
    #[command(flatten)]
    variant: VariantArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct TsneArgs {
    /// Network archive to extract features from.
    #[arg(long)]
    chi: PathBuf,
    /// Dataset directory (repeatable); rows are tagged with its name.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    /// Layer or unit to tap (default: the network output).
    #[arg(long)]
    layer: Option<String>,
    /// Apply softmax to the tapped features.
    #[arg(long)]
    softmax: bool,
    /// Samples taken from each dataset.
    #[arg(long, default_value_t = 150)]
    max_per_dataset: usize,
    /// Effective neighbour count.
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// Optimization iterations.
    #[arg(long, default_value_t = 1000)]
    tsne_iters: usize,
    /// Seed for the embedding initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// sweep.json from a sweep run (repeatable, one per dataset).
    #[arg(long = "sweep", required = true)]
    sweeps: Vec<PathBuf>,
    /// Baseline variant [default: the first variant].
    #[arg(long)]
    baseline: Option<String>,
    /// Variant compared against the baseline [default: every other variant].
    #[arg(long = "target-variant")]
    target: Option<String>,
    /// Setup at which variants are compared, e.g. `N-5` or `3`.
    #[arg(long, default_value = "N-5")]
    nu: String,
}

#[derive(Args)]
struct RerunArgs {
    /// manifest.json of the run to replay.
    manifest: PathBuf,
}

fn pick(flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    match flag.as_ref().or(file.as_ref()) {
        Some(p) => existing(p),
        None => Err(config_error(format!("missing {what} (flag or config)"))),
    }
}

fn variants(args: &VariantArgs, file: &ExperimentConfig) -> anyhow::Result<Vec<VariantSpec>> {
    if let Some(v) = args.variant()? {
        return Ok(vec![v]);
    }
    file.variants.iter().map(VariantEntry::resolve).collect()
}

fn allowed(file: &ExperimentConfig, settings: &TrainSettings) -> Vec<usize> {
    file.allowed_sizes
        .clone()
        .unwrap_or_else(|| settings.allowed_sizes())
}

fn build_spec(command: &Command) -> anyhow::Result<(RunSpec, Option<PathBuf>)> {
    Ok(match command {
        Command::Synth(a) => {
            let base = match a.kind.as_str() {
                "source" => SynthSpec::source(a.seed),
                "target" => SynthSpec::target(a.seed),
                other => return Err(config_error(format!("unknown synth kind `{other}`"))),
            };
            let spec = SynthSpec {
                name: a.name.clone().unwrap_or(base.name.clone()),
                first_class: a.first_class.unwrap_or(base.first_class),
                classes: a.classes.unwrap_or(base.classes),
                per_class: a.per_class.unwrap_or(base.per_class),
                channels: a.channels.unwrap_or(base.channels),
                size: a.size.unwrap_or(base.size),
                noise: a.noise.unwrap_or(base.noise),
                seed: a.seed,
            };
            (RunSpec::Synth { spec }, None)
        }
        Command::Import(a) => (
            RunSpec::Import {
                input: existing(&a.input)?,
                name: a.name.clone(),
                size: a.size,
                channels: a.channels,
            },
            None,
        ),
        Command::Pretrain(a) => {
            let file = a.train.load()?;
            (
                RunSpec::Pretrain {
                    source: pick(&a.source, &file.source, "--source")?,
                    architecture: a
                        .arch
                        .or(file.architecture)
                        .unwrap_or(Architecture::ToyAlexnet),
                    train: a.train.settings(&file),
                    seed: a.train.seed(&file),
                },
                file.out_dir,
            )
        }
        Command::Finetune(a) => {
            let file = a.train.load()?;
            let settings = a.train.settings(&file);
            let mut vs = variants(&a.variant, &file)?;
            if vs.len() != 1 {
                return Err(config_error(format!(
                    "finetune needs exactly one variant (--tln or one [[variants]] entry), got {}",
                    vs.len()
                )));
            }
            let target = a.target.as_ref().or(file.targets.first()).cloned();
            (
                RunSpec::Finetune {
                    chi: pick(&a.chi, &file.chi, "--chi")?,
                    target: pick(&target, &None, "--target")?,
                    split: a.split.or(file.split).unwrap_or(0.75),
                    variant: vs.remove(0),
                    allowed_sizes: allowed(&file, &settings),
                    train: settings,
                    seed: a.train.seed(&file),
                },
                file.out_dir,
            )
        }
        Command::Sweep(a) => {
            let file = a.train.load()?;
            let settings = a.train.settings(&file);
            let seed = a.train.seed(&file);
            let chi = if a.chi.is_some() || (a.source.is_none() && file.chi.is_some()) {
                ChiSource::Archive(pick(&a.chi, &file.chi, "--chi")?)
            } else {
                ChiSource::Pretrain {
                    source: pick(&a.source, &file.source, "--chi or --source")?,
                    architecture: a
                        .arch
                        .or(file.architecture)
                        .unwrap_or(Architecture::ToyAlexnet),
                    train: TrainSettings {
                        preset: settings.preset,
                        ..Default::default()
                    },
                    seed: tlnlab::seed::derive_seed(seed, &["pretrain"]),
                }
            };
            let targets = if a.targets.is_empty() {
                &file.targets
            } else {
                &a.targets
            };
            if targets.is_empty() {
                return Err(config_error("sweep needs at least one --target"));
            }
            let vs = variants(&a.variant, &file)?;
            if vs.is_empty() {
                return Err(config_error("sweep needs variants (--tln or [[variants]])"));
            }
            let nus = if a.nus.is_empty() {
                file.nus.clone()
            } else {
                Some(a.nus.clone())
            };
            (
                RunSpec::Sweep {
                    chi,
                    targets: targets
                        .iter()
                        .map(|t| existing(t))
                        .collect::<anyhow::Result<_>>()?,
                    split: a.split.or(file.split).unwrap_or(0.75),
                    variants: vs,
                    repeats: a.repeats.or(file.repeats).unwrap_or(1),
                    nus,
                    allowed_sizes: allowed(&file, &settings),
                    train: settings,
                    seed,
                },
                file.out_dir,
            )
        }
        Command::Tsne(a) => (
            RunSpec::Tsne {
                chi: existing(&a.chi)?,
                datasets: a
                    .datasets
                    .iter()
                    .map(|d| existing(d))
                    .collect::<anyhow::Result<_>>()?,
                layer: a.layer.clone(),
                softmax: a.softmax,
                max_per_dataset: a.max_per_dataset,
                tsne: TsneConfig {
                    perplexity: a.perplexity,
                    iterations: a.tsne_iters,
                    seed: a.seed,
                    ..Default::default()
                },
            },
            None,
        ),
        Command::Report(a) => (
            RunSpec::Report {
                sweeps: a
                    .sweeps
                    .iter()
                    .map(|s| existing(s))
                    .collect::<anyhow::Result<_>>()?,
                baseline: a.baseline.clone(),
                target: a.target.clone(),
                nu: a.nu.clone(),
            },
            None,
        ),
        Command::Rerun(_) => unreachable!("handled before spec construction"),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<Mismatch>() {
            return EXIT_MISMATCH;
        }
        if let Some(e) = cause.downcast_ref::<tlnlab::Error>() {
            use tlnlab::Error as E;
            return match e {
                E::Parse(_)
                | E::Contract(_)
                | E::UnknownLayer { .. }
                | E::Dimension { .. }
                | E::Index(_) => EXIT_CONFIG,
                E::CorruptDataset { .. }
                | E::LabelOverflow { .. }
                | E::Archive(_)
                | E::Io(_)
                | E::Json(_) => EXIT_DATA,
                E::NonFiniteLoss { .. }
                | E::NonFiniteEmbedding { .. }
                | E::Convergence { .. }
                | E::SweepFailed { .. } => EXIT_TRAINING,
            };
        }
        if cause.is::<std::io::Error>()
            || cause.is::<image::ImageError>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_DATA;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = match &cli.command {
        Command::Rerun(a) => {
            let out = cli
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            commands::rerun(&a.manifest, &out, jobs)
        }
        other => build_spec(other).and_then(|(spec, file_out)| {
            let out = cli
                .out_dir
                .clone()
                .or(file_out)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            commands::run(&spec, &out, jobs).map(|_| ())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
