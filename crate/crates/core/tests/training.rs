mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlnlab::nn::arch::Architecture;
use tlnlab::pretrain::pretrain;
use tlnlab::synth::{generate, SynthSpec};
use tlnlab::tln::{build_tln, make_freeze_plan, parse_tln, slice, TlnConfig};
use tlnlab::train::augment::{AugmentConfig, Pipeline};
use tlnlab::train::{
    eval_batch, evaluate, predict_dataset, split_dataset, train, Budget, Schedule, TrainConfig,
};
use tlnlab::tsne::extract_features;

fn bars() -> tlnlab::train::Dataset {
    generate(&SynthSpec {
        name: "bars".into(),
        first_class: 5,
        classes: 2,
        per_class: 40,
        size: 8,
        noise: 0.05,
        ..SynthSpec::source(4)
    })
    .unwrap()
}

fn short_config(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(Budget {
        iterations,
        batch_size: 16,
    });
    cfg.schedule = Schedule {
        base_lr: 0.02,
        decay_factor: 0.1,
        step_epochs: 100,
    };
    cfg
}

#[test]
fn learns_a_separable_problem() {
    let data = bars();
    let (chi, trace) = pretrain(Architecture::ToyAlexnet, &data, &short_config(200), 1).unwrap();
    let acc = evaluate(&chi.network, &data).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(trace.last().unwrap().loss < trace[0].loss);
    assert_eq!(trace.last().unwrap().iteration, 200);
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = bars();
    let cfg = short_config(30);
    let a = pretrain(Architecture::ToyAlexnet, &data, &cfg, 9).unwrap();
    let b = pretrain(Architecture::ToyAlexnet, &data, &cfg, 9).unwrap();
    assert_eq!(a, b);
    let c = pretrain(Architecture::ToyAlexnet, &data, &cfg, 10).unwrap();
    assert_ne!(a.0.network, c.0.network);
}

#[test]
fn one_log_line_per_epoch() {
    let data = common::tiny_target(5, 1);
    let chi = common::random_chi(8, 2);
    let tln = build_tln(
        &chi,
        &TlnConfig::new(parse_tln("[chi]_N^psi").unwrap(), 4),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let plan = make_freeze_plan(&tln, 8).unwrap();
    let mut net = tln.network.clone();
    // 20 samples in batches of 6: 4 iterations per epoch, 10 iterations
    // end part-way through the third epoch.
    let cfg = TrainConfig::new(Budget {
        iterations: 10,
        batch_size: 6,
    });
    let trace = train(&mut net, &plan, &data, Some(&data), &cfg, 0).unwrap();
    let marks: Vec<(usize, usize)> = trace.iter().map(|m| (m.epoch, m.iteration)).collect();
    assert_eq!(marks, [(0, 4), (1, 8), (2, 10)]);
    assert!(trace.iter().all(|m| m.test_acc.is_some()));
}

#[test]
fn evaluate_matches_argmax_of_predictions() {
    let data = common::tiny_target(10, 3);
    let net = common::random_chi(4, 5).network;
    let logits = predict_dataset(&net, &data, None).unwrap();
    assert_eq!(logits.shape(), [40, 4]);
    let correct = logits
        .rows()
        .zip(data.labels())
        .filter(|(row, &label)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v == max) == Some(label as usize)
        })
        .count();
    assert_eq!(evaluate(&net, &data).unwrap(), correct as f64 / 40.0);
}

#[test]
fn features_at_a_tap_match_the_sliced_network() {
    let data = common::tiny_target(4, 6);
    let chi = common::random_chi(8, 7);
    let features = extract_features(&chi.network, &data, Some("L7")).unwrap();
    let prefix = slice(&chi, 7).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let direct = prefix
        .network
        .predict(&eval_batch(&data, &idx).unwrap())
        .unwrap();
    assert_eq!((features.n, features.d), (16, 64));
    assert_eq!(features.data, direct.data());
    assert!(features.origins.iter().all(|o| o == "synth-target"));
}

#[test]
fn stratified_split_partitions_every_class() {
    let data = generate(&SynthSpec {
        per_class: 10,
        size: 8,
        ..SynthSpec::target(3)
    })
    .unwrap();
    let (tr, te) = split_dataset(&data, 0.75, 11).unwrap();
    assert_eq!((tr.len(), te.len()), (32, 8));
    for class in 0..4 {
        assert_eq!(tr.labels().iter().filter(|&&l| l == class).count(), 8);
        assert_eq!(te.labels().iter().filter(|&&l| l == class).count(), 2);
    }
    let mut all: Vec<&[u8]> = (0..tr.len())
        .map(|i| tr.raw(i))
        .chain((0..te.len()).map(|i| te.raw(i)))
        .collect();
    let mut orig: Vec<&[u8]> = (0..data.len()).map(|i| data.raw(i)).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
    assert_eq!(split_dataset(&data, 0.75, 11).unwrap(), (tr, te));
}

#[test]
fn augmented_images_are_standardized() {
    let data = generate(&SynthSpec::target(5)).unwrap();
    let pipe = Pipeline::new(AugmentConfig::default(), data.stats.clone(), 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sums = [0.0; 3];
    let mut squares = [0.0; 3];
    let mut count = 0.0;
    for i in 0..data.len() {
        let img = pipe.augment_image(&data.image(i), &mut rng).unwrap();
        assert_eq!(img.shape(), [3, 16, 16]);
        for (c, plane) in img.data().chunks(256).enumerate() {
            sums[c] += plane.iter().sum::<f64>();
            squares[c] += plane.iter().map(|v| v * v).sum::<f64>();
        }
        count += 256.0;
    }
    for c in 0..3 {
        let mean = sums[c] / count;
        let std = (squares[c] / count - mean * mean).sqrt();
        assert!(mean.abs() < 0.05, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "channel {c} std {std}");
    }
}
