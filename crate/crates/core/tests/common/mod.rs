#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlnlab::nn::arch::Architecture;
use tlnlab::synth::{generate, SynthSpec};
use tlnlab::tln::{PretrainedNetwork, SourceMeta};
use tlnlab::train::Dataset;

/// An untrained toy-alexnet over 8×8 inputs, good enough for plumbing checks.
pub fn random_chi(classes: usize, seed: u64) -> PretrainedNetwork {
    let arch = Architecture::ToyAlexnet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = arch.build([3, 8, 8], classes, &mut rng).unwrap();
    let meta = SourceMeta {
        dataset: "random".into(),
        classes,
        architecture: arch.name().into(),
        granularity: arch.granularity(),
    };
    PretrainedNetwork::new(net, meta).unwrap()
}

/// Small 8×8 target-like dataset.
pub fn tiny_target(per_class: usize, seed: u64) -> Dataset {
    generate(&SynthSpec {
        per_class,
        size: 8,
        ..SynthSpec::target(seed)
    })
    .unwrap()
}

/// Every stored tensor of a network, flattened in a fixed order.
pub fn snapshot(net: &tlnlab::nn::Network) -> Vec<Vec<Vec<u64>>> {
    net.units
        .iter()
        .map(|u| {
            u.layers
                .iter()
                .flat_map(|l| l.params.named())
                .filter_map(|(_, t)| t.map(|t| t.data().iter().map(|v| v.to_bits()).collect()))
                .collect()
        })
        .collect()
}
