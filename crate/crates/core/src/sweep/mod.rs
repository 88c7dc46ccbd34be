//! The layer-wise fine-tuning scheme: every variant is trained once per
//! setup ν (units before ν frozen) and per repeat, from the same initial
//! parameters for all setups of a repeat.

mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{content_hash, derive_seed};
use crate::tln::{
    build_tln, make_freeze_plan, NormScheme, PretrainedNetwork, SourceMeta, Tln, TlnConfig,
    TlnNotation, DESK_SIZES,
};
use crate::train::{epoch_len, train, Dataset, EpochMetrics, TrainConfig};

pub use report::{
    best_setup, compare_variants, curves, render_curves, render_gains, CurvePoint, GainRow,
    GainTable,
};

/// How transferred units start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Copied from the source network.
    #[default]
    Pretrained,
    /// Redrawn at random, keeping only the architecture.
    Scratch,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(InitMode::Pretrained),
            "scratch" => Ok(InitMode::Scratch),
            other => Err(Error::contract(format!(
                "unknown init mode `{other}` (expected `pretrained` or `scratch`)"
            ))),
        }
    }
}

/// A TLN template; its ν is replaced by each setup of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub notation: TlnNotation,
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default = "default_norm")]
    pub norm: NormScheme,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub init: InitMode,
}

fn default_norm() -> NormScheme {
    NormScheme::BatchStd
}

impl VariantSpec {
    pub fn new(name: impl Into<String>, notation: TlnNotation) -> Self {
        VariantSpec {
            name: name.into(),
            notation,
            sizes: Vec::new(),
            norm: NormScheme::BatchStd,
            dropout: 0.0,
            init: InitMode::Pretrained,
        }
    }

    pub fn tln_config(&self, classes: usize, allowed_sizes: &[usize]) -> TlnConfig {
        TlnConfig {
            notation: self.notation,
            sizes: self.sizes.clone(),
            norm: self.norm,
            target_classes: classes,
            allowed_sizes: allowed_sizes.to_vec(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variants: Vec<VariantSpec>,
    pub master_seed: u64,
    pub train: TrainConfig,
    pub dataset: String,
    pub repeats: usize,
    #[serde(default = "default_allowed")]
    pub allowed_sizes: Vec<usize>,
    /// Restricts every variant to these setups when present.
    #[serde(default)]
    pub nus: Option<Vec<usize>>,
}

fn default_allowed() -> Vec<usize> {
    DESK_SIZES.to_vec()
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::contract("sweep needs at least one variant"));
        }
        if self.repeats == 0 {
            return Err(Error::contract("sweep needs at least one repeat"));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("variant names must be unique"));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Setups ν in sweep order: from the last tunable unit down to 1.
pub fn generate_setups(tln: &Tln) -> Vec<usize> {
    (1..=tln.tunable_units()).rev().collect()
}

/// Seed for the initial parameters of `variant` in `repeat`, shared by all setups.
pub fn init_seed(master: u64, variant: &str, repeat: usize) -> u64 {
    derive_seed(master, &["init", variant, &repeat.to_string()])
}

/// Seed for the minibatch, augmentation and dropout stream of one cell.
pub fn train_seed(master: u64, variant: &str, nu: usize, repeat: usize) -> u64 {
    derive_seed(
        master,
        &["train", variant, &nu.to_string(), &repeat.to_string()],
    )
}

/// The TLN every setup of `variant` in `repeat` starts from.
pub fn initial_tln(
    chi: &PretrainedNetwork,
    variant: &VariantSpec,
    master_seed: u64,
    allowed_sizes: &[usize],
    classes: usize,
    repeat: usize,
) -> Result<Tln> {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(master_seed, &variant.name, repeat));
    let mut tln = build_tln(chi, &variant.tln_config(classes, allowed_sizes), &mut rng)?;
    if variant.init == InitMode::Scratch {
        tln.reinit_transferred(&mut rng);
    }
    Ok(tln)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub nu: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub trace: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSetups {
    pub variant: String,
    pub notation: String,
    pub nus: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: SweepConfig,
    pub config_hash: String,
    pub source: SourceMeta,
    /// Depth N of the source network.
    pub n: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub epoch_len: usize,
    pub setups: Vec<VariantSetups>,
}

/// Accuracy for every (variant, ν, repeat), with per-cell metric traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub manifest: SweepManifest,
    /// Ordered by variant (config order), ν descending, repeat.
    pub cells: Vec<Cell>,
}

impl SweepResult {
    pub fn cell(&self, variant: &str, nu: usize, repeat: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.nu == nu && c.repeat == repeat)
    }

    pub fn accuracies(&self, variant: &str, nu: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant && c.nu == nu)
            .map(|c| c.accuracy)
            .collect()
    }

    pub fn setups(&self, variant: &str) -> Option<&[usize]> {
        self.manifest
            .setups
            .iter()
            .find(|s| s.variant == variant)
            .map(|s| s.nus.as_slice())
    }

    /// Long form `variant,nu,repeat,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,nu,repeat,accuracy\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.variant, c.nu, c.repeat, c.accuracy
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Job {
    variant: usize,
    nu: usize,
    repeat: usize,
}

/// Runs every cell of the sweep on a pool of `jobs` threads.
///
/// Each cell clones its repeat's initial TLN and owns its optimizer, so
/// the result does not depend on `jobs` or on scheduling.
pub fn run_sweep(
    chi: &PretrainedNetwork,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &SweepConfig,
    jobs: usize,
) -> Result<SweepResult> {
    cfg.validate()?;
    if train_ds.classes() != test_ds.classes() {
        return Err(Error::contract(
            "train and test sets disagree on the class count",
        ));
    }
    let classes = train_ds.classes();

    let mut inits = Vec::new();
    let mut setups = Vec::new();
    for variant in &cfg.variants {
        let per_repeat = (0..cfg.repeats)
            .map(|r| {
                initial_tln(
                    chi,
                    variant,
                    cfg.master_seed,
                    &cfg.allowed_sizes,
                    classes,
                    r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut nus = generate_setups(&per_repeat[0]);
        if let Some(only) = &cfg.nus {
            nus.retain(|nu| only.contains(nu));
            if nus.is_empty() {
                return Err(Error::contract(format!(
                    "none of the requested setups {only:?} exist for variant `{}`",
                    variant.name
                )));
            }
        }
        setups.push(VariantSetups {
            variant: variant.name.clone(),
            notation: variant.notation.to_string(),
            nus,
        });
        inits.push(per_repeat);
    }

    let mut queue = Vec::new();
    for (v, s) in setups.iter().enumerate() {
        for &nu in &s.nus {
            for repeat in 0..cfg.repeats {
                queue.push(Job {
                    variant: v,
                    nu,
                    repeat,
                });
            }
        }
    }

    let run_cell = |job: &Job| -> Result<Cell> {
        let name = &cfg.variants[job.variant].name;
        let mut tln = inits[job.variant][job.repeat].clone();
        let plan = make_freeze_plan(&tln, job.nu)?;
        let seed = train_seed(cfg.master_seed, name, job.nu, job.repeat);
        let trace = train(
            &mut tln.network,
            &plan,
            train_ds,
            Some(test_ds),
            &cfg.train,
            seed,
        )?;
        let accuracy = match trace.last().and_then(|m| m.test_acc) {
            Some(a) => a,
            None => crate::train::evaluate(&tln.network, test_ds)?,
        };
        Ok(Cell {
            variant: name.clone(),
            nu: job.nu,
            repeat: job.repeat,
            seed,
            accuracy,
            trace,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<Cell>> = pool.install(|| queue.par_iter().map(run_cell).collect());

    let mut cells = Vec::with_capacity(outcomes.len());
    let mut failed = Vec::new();
    for (job, outcome) in queue.iter().zip(outcomes) {
        match outcome {
            Ok(cell) => cells.push(cell),
            Err(e) => failed.push(format!(
                "{} nu={} repeat={}: {e}",
                cfg.variants[job.variant].name, job.nu, job.repeat
            )),
        }
    }
    if !failed.is_empty() {
        return Err(Error::SweepFailed { cells: failed });
    }

    let manifest = SweepManifest {
        config: cfg.clone(),
        config_hash: cfg.content_hash(),
        source: chi.meta.clone(),
        n: chi.depth(),
        train_len: train_ds.len(),
        test_len: test_ds.len(),
        epoch_len: epoch_len(
            train_ds.len(),
            cfg.train.budget.batch_size.min(train_ds.len()),
        ),
        setups,
    };
    Ok(SweepResult { manifest, cells })
}
