//! Assembling transfer-learning networks from a pretrained source.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::arch::Granularity;
use crate::nn::{fc, relu, Init, LayerKind, LayerSpec, Network, Unit, UnitRole};
use crate::tln::notation::TlnNotation;

/// Neuron counts allowed for appended layers unless configured otherwise.
pub const FULL_SIZES: [usize; 4] = [512, 1024, 2048, 4096];

/// Size set for desk-scale networks whose classifier is tens of units wide.
pub const DESK_SIZES: [usize; 4] = [32, 64, 128, 256];

/// Name of the new classification module.
pub const PSI: &str = "psi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub dataset: String,
    pub classes: usize,
    pub architecture: String,
    pub granularity: Granularity,
}

/// A source network χ_N whose last unit is its classification layer L_N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedNetwork {
    pub network: Network,
    pub meta: SourceMeta,
}

impl PretrainedNetwork {
    pub fn new(network: Network, meta: SourceMeta) -> Result<Self> {
        network.validate()?;
        let last = network
            .units
            .last()
            .ok_or_else(|| Error::contract("pretrained network has no units"))?;
        let classifier = last.layers.iter().rev().find(|l| {
            !matches!(
                l.spec.kind,
                LayerKind::SoftmaxHead | LayerKind::Dropout { .. }
            )
        });
        match classifier.map(|l| &l.spec.kind) {
            Some(LayerKind::Fc { outputs, .. }) if *outputs == meta.classes => {}
            _ => {
                return Err(Error::contract(format!(
                    "last unit `{}` must end in an FC classification layer with {} outputs",
                    last.name, meta.classes
                )))
            }
        }
        Ok(PretrainedNetwork { network, meta })
    }

    /// N, the number of transferable units including L_N.
    pub fn depth(&self) -> usize {
        self.network.units.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    /// Row-wise L2 normalization, then a single learnable scale.
    L2,
    /// Per-feature batch standardization, then per-feature scale and shift.
    #[serde(rename = "std")]
    BatchStd,
}

impl std::str::FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(NormScheme::L2),
            "std" | "batchstd" => Ok(NormScheme::BatchStd),
            other => Err(Error::contract(format!(
                "unknown norm scheme `{other}` (expected `l2` or `std`)"
            ))),
        }
    }
}

impl std::fmt::Display for NormScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormScheme::L2 => "l2",
            NormScheme::BatchStd => "std",
        })
    }
}

/// Everything needed to assemble one TLN from a source network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlnConfig {
    pub notation: TlnNotation,
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default = "default_norm")]
    pub norm: NormScheme,
    pub target_classes: usize,
    #[serde(default = "default_allowed")]
    pub allowed_sizes: Vec<usize>,
    /// Dropout after appended-layer ReLUs; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

fn default_norm() -> NormScheme {
    NormScheme::BatchStd
}

fn default_allowed() -> Vec<usize> {
    FULL_SIZES.to_vec()
}

/// κ, ν and τ resolved against a concrete source depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub n: usize,
    pub kappa: usize,
    pub nu: usize,
    pub tau: usize,
}

impl TlnConfig {
    pub fn new(notation: TlnNotation, target_classes: usize) -> Self {
        TlnConfig {
            notation,
            sizes: Vec::new(),
            norm: default_norm(),
            target_classes,
            allowed_sizes: default_allowed(),
            dropout: 0.0,
        }
    }

    pub fn with_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.sizes = sizes;
        self
    }

    pub fn with_norm(mut self, norm: NormScheme) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_allowed_sizes(mut self, allowed: Vec<usize>) -> Self {
        self.allowed_sizes = allowed;
        self
    }

    /// Resolves relative references and checks every structural invariant.
    pub fn resolve(&self, n: usize) -> Result<Resolved> {
        let kappa = self.notation.kappa.resolve(n)?;
        let nu = self.notation.nu.resolve(n)?;
        let tau = self.notation.tau;
        if kappa > n {
            return Err(Error::contract(format!("kappa {kappa} exceeds N = {n}")));
        }
        if tau != self.sizes.len() {
            return Err(Error::contract(format!(
                "tau = {tau} but {} layer sizes were given",
                self.sizes.len()
            )));
        }
        if tau > 0 && kappa != n {
            return Err(Error::contract(
                "augmentation requires the pretrained classification layer (kappa = N)",
            ));
        }
        if let Some(bad) = self.sizes.iter().find(|s| !self.allowed_sizes.contains(s)) {
            return Err(Error::contract(format!(
                "layer size {bad} not in the configured set {:?}",
                self.allowed_sizes
            )));
        }
        if nu > kappa + tau {
            return Err(Error::contract(format!(
                "nu = {nu} exceeds kappa + tau = {}",
                kappa + tau
            )));
        }
        if self.target_classes < 2 {
            return Err(Error::contract("the target task needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout rate must be in [0, 1)"));
        }
        Ok(Resolved { n, kappa, nu, tau })
    }
}

/// The first κ units of a source network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPrefix {
    pub network: Network,
    pub n: usize,
}

impl NetworkPrefix {
    pub fn kappa(&self) -> usize {
        self.network.units.len()
    }

    pub fn retains_classifier(&self) -> bool {
        self.kappa() == self.n
    }
}

/// A source network sliced, optionally deepened, and topped with ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tln {
    pub network: Network,
    pub n: usize,
    pub kappa: usize,
    pub tau: usize,
}

impl Tln {
    /// Units that take part in the layer-wise scheme (everything but ψ).
    pub fn tunable_units(&self) -> usize {
        self.kappa + self.tau
    }

    /// Redraws every transferred unit, discarding source knowledge.
    pub fn reinit_transferred(&mut self, rng: &mut impl Rng) {
        for unit in &mut self.network.units {
            if unit.role == UnitRole::Transferred {
                for layer in &mut unit.layers {
                    layer.params = crate::nn::init_layer(&layer.spec, rng);
                }
            }
        }
    }
}

/// χ_N^κ: copies the first κ units. κ = N keeps L_N; κ = N − 1 drops it.
pub fn slice(chi: &PretrainedNetwork, kappa: usize) -> Result<NetworkPrefix> {
    let n = chi.depth();
    if kappa == 0 || kappa > n {
        return Err(Error::contract(format!(
            "kappa must be in 1..={n}, got {kappa}"
        )));
    }
    let network = Network {
        input_shape: chi.network.input_shape.clone(),
        units: chi.network.units[..kappa].to_vec(),
    };
    Ok(NetworkPrefix { network, n })
}

fn flat_features(prefix: &NetworkPrefix) -> Result<usize> {
    let shape = prefix.network.output_shape()?;
    if shape.len() != 1 {
        return Err(Error::contract(format!(
            "classifier module needs a flat feature vector, prefix ends in shape {shape:?}"
        )));
    }
    Ok(shape[0])
}

fn psi_unit(features: usize, classes: usize, rng: &mut impl Rng) -> Result<Unit> {
    if classes < 2 {
        return Err(Error::contract(format!(
            "classifier module needs at least 2 classes, got {classes}"
        )));
    }
    Ok(Unit::new(
        PSI,
        UnitRole::Classifier,
        vec![
            fc("psi.fc", features, classes, Init::GlorotUniform),
            LayerSpec::new("psi.softmax", LayerKind::SoftmaxHead),
        ],
        rng,
    ))
}

/// `[χ_N^κ]^ψ`: appends a randomly initialized FC classifier with softmax head.
pub fn append_classifier(
    prefix: NetworkPrefix,
    target_classes: usize,
    rng: &mut impl Rng,
) -> Result<Tln> {
    let features = flat_features(&prefix)?;
    let psi = psi_unit(features, target_classes, rng)?;
    let kappa = prefix.kappa();
    let mut network = prefix.network;
    network.units.push(psi);
    network.validate()?;
    Ok(Tln {
        network,
        n: prefix.n,
        kappa,
        tau: 0,
    })
}

/// `[χ_N]^{τ+ψ}`: stacks `Norm → Scale → FC(s) → ReLU` per size on top of
/// L_N, then appends ψ.
pub fn augment_depth(
    prefix: NetworkPrefix,
    sizes: &[usize],
    norm: NormScheme,
    target_classes: usize,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<Tln> {
    if !prefix.retains_classifier() {
        return Err(Error::contract(
            "augmentation requires the pretrained classification layer",
        ));
    }
    if sizes.is_empty() {
        return Err(Error::contract(
            "depth augmentation needs at least one layer size",
        ));
    }
    let mut width = flat_features(&prefix)?;
    let n = prefix.n;
    let mut network = prefix.network;
    for (i, &size) in sizes.iter().enumerate() {
        let name = format!("L{}", n + i + 1);
        let mut specs = match norm {
            NormScheme::L2 => vec![
                LayerSpec::new(format!("{name}.norm"), LayerKind::L2Norm),
                LayerSpec::new(
                    format!("{name}.scale"),
                    LayerKind::Scale {
                        features: width,
                        per_feature: false,
                    },
                ),
            ],
            NormScheme::BatchStd => vec![
                LayerSpec::new(
                    format!("{name}.norm"),
                    LayerKind::BatchStd { features: width },
                ),
                LayerSpec::new(
                    format!("{name}.scale"),
                    LayerKind::Scale {
                        features: width,
                        per_feature: true,
                    },
                ),
            ],
        };
        specs.push(fc(&format!("{name}.fc"), width, size, Init::HeUniform));
        specs.push(relu(&format!("{name}.relu")));
        if dropout > 0.0 {
            specs.push(LayerSpec::new(
                format!("{name}.dropout"),
                LayerKind::Dropout { rate: dropout },
            ));
        }
        network
            .units
            .push(Unit::new(name, UnitRole::Appended, specs, rng));
        width = size;
    }
    network.units.push(psi_unit(width, target_classes, rng)?);
    network.validate()?;
    Ok(Tln {
        network,
        n,
        kappa: n,
        tau: sizes.len(),
    })
}

/// Builds the TLN described by `cfg`. New parameters are drawn from `rng`
/// in network order, so the result does not depend on ν.
pub fn build_tln(chi: &PretrainedNetwork, cfg: &TlnConfig, rng: &mut impl Rng) -> Result<Tln> {
    let r = cfg.resolve(chi.depth())?;
    let prefix = slice(chi, r.kappa)?;
    if r.tau == 0 {
        append_classifier(prefix, cfg.target_classes, rng)
    } else {
        augment_depth(
            prefix,
            &cfg.sizes,
            cfg.norm,
            cfg.target_classes,
            cfg.dropout,
            rng,
        )
    }
}
