//! Run descriptions and the `manifest.json` written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlnlab::nn::arch::Architecture;
use tlnlab::seed::content_hash;
use tlnlab::sweep::VariantSpec;
use tlnlab::synth::SynthSpec;
use tlnlab::tsne::TsneConfig;

use crate::config::TrainSettings;

/// Where a sweep gets its source network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiSource {
    Archive(PathBuf),
    Pretrain {
        source: PathBuf,
        architecture: Architecture,
        train: TrainSettings,
        seed: u64,
    },
}

/// Everything a command needs to reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunSpec {
    Synth {
        spec: SynthSpec,
    },
    Import {
        input: PathBuf,
        name: String,
        size: usize,
        channels: usize,
    },
    Pretrain {
        source: PathBuf,
        architecture: Architecture,
        train: TrainSettings,
        seed: u64,
    },
    Finetune {
        chi: PathBuf,
        target: PathBuf,
        split: f64,
        variant: VariantSpec,
        allowed_sizes: Vec<usize>,
        train: TrainSettings,
        seed: u64,
    },
    Sweep {
        chi: ChiSource,
        targets: Vec<PathBuf>,
        split: f64,
        variants: Vec<VariantSpec>,
        repeats: usize,
        nus: Option<Vec<usize>>,
        allowed_sizes: Vec<usize>,
        train: TrainSettings,
        seed: u64,
    },
    Tsne {
        chi: PathBuf,
        datasets: Vec<PathBuf>,
        layer: Option<String>,
        softmax: bool,
        max_per_dataset: usize,
        tsne: TsneConfig,
    },
    Report {
        sweeps: Vec<PathBuf>,
        baseline: Option<String>,
        target: Option<String>,
        nu: String,
    },
}

impl RunSpec {
    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("run spec serializes"))
    }

    /// Files read by the run.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let dataset = |d: &PathBuf| vec![d.join("meta.json"), d.join("data.bin")];
        match self {
            RunSpec::Synth { .. } | RunSpec::Import { .. } => vec![],
            RunSpec::Pretrain { source, .. } => dataset(source),
            RunSpec::Finetune { chi, target, .. } => {
                let mut v = vec![chi.clone()];
                v.extend(dataset(target));
                v
            }
            RunSpec::Sweep { chi, targets, .. } => {
                let mut v = match chi {
                    ChiSource::Archive(p) => vec![p.clone()],
                    ChiSource::Pretrain { source, .. } => dataset(source),
                };
                v.extend(targets.iter().flat_map(dataset));
                v
            }
            RunSpec::Tsne { chi, datasets, .. } => {
                let mut v = vec![chi.clone()];
                v.extend(datasets.iter().flat_map(dataset));
                v
            }
            RunSpec::Report { sweeps, .. } => sweeps.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, label: String) -> anyhow::Result<Self> {
        Ok(FileDigest {
            path: label,
            sha256: content_hash(&fs::read(path)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run: RunSpec,
    pub run_hash: String,
    /// Worker threads used; outputs do not depend on it.
    pub jobs: usize,
    pub inputs: Vec<FileDigest>,
    /// Output files relative to the output directory.
    pub outputs: Vec<FileDigest>,
}
