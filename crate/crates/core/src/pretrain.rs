//! Training a source network χ_N from scratch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::arch::Architecture;
use crate::tln::{FreezePlan, PretrainedNetwork, SourceMeta};
use crate::train::{epoch_len, train, Budget, Dataset, EpochMetrics, Schedule, TrainConfig};

/// Builds `arch` for `source`, trains every unit and wraps the result.
pub fn pretrain(
    arch: Architecture,
    source: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(PretrainedNetwork, Vec<EpochMetrics>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = arch.build(source.dims, source.classes(), &mut rng)?;
    let plan = FreezePlan::all_trainable(net.units.len());
    let trace = train(&mut net, &plan, source, None, cfg, seed)?;
    let meta = SourceMeta {
        dataset: source.name.clone(),
        classes: source.classes(),
        architecture: arch.name().to_string(),
        granularity: arch.granularity(),
    };
    Ok((PretrainedNetwork::new(net, meta)?, trace))
}

/// Desk-scale source training: batch 32 for 12 epochs at rate 0.02,
/// dropping tenfold after epoch 8.
pub fn desk_pretrain_config(source_len: usize) -> TrainConfig {
    let batch_size = 32.min(source_len.max(2));
    let mut cfg = TrainConfig::new(Budget {
        iterations: 12 * epoch_len(source_len, batch_size),
        batch_size,
    });
    cfg.schedule = Schedule {
        base_lr: 0.02,
        decay_factor: 0.1,
        step_epochs: 8,
    };
    cfg
}
