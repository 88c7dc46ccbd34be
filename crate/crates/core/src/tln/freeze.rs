use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::UnitRole;
use crate::tln::build::Tln;

/// Learning-rate multiplier for appended layers and the classifier module.
pub const NEW_LAYER_LR_MULTIPLIER: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPlan {
    pub trainable: bool,
    pub lr_multiplier: f64,
}

/// Per-unit trainable flags and learning-rate multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub units: Vec<UnitPlan>,
}

impl FreezePlan {
    /// Everything trainable at the base rate (used for pretraining).
    pub fn all_trainable(units: usize) -> Self {
        FreezePlan {
            units: vec![
                UnitPlan {
                    trainable: true,
                    lr_multiplier: 1.0,
                };
                units
            ],
        }
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.trainable).collect()
    }

    /// True when the trainable units form a contiguous suffix.
    pub fn is_suffix(&self) -> bool {
        let first = self.units.iter().position(|u| u.trainable);
        match first {
            None => true,
            Some(i) => self.units[i..].iter().all(|u| u.trainable),
        }
    }
}

/// Freezes units `1..ν` and trains units `ν..` plus ψ.
pub fn make_freeze_plan(tln: &Tln, nu: usize) -> Result<FreezePlan> {
    let total = tln.tunable_units();
    if nu == 0 || nu > total {
        return Err(Error::contract(format!(
            "nu must be in 1..={total}, got {nu}"
        )));
    }
    let units = tln
        .network
        .units
        .iter()
        .enumerate()
        .map(|(i, unit)| {
            let trainable = unit.role == UnitRole::Classifier || i + 1 >= nu;
            let lr_multiplier = match unit.role {
                UnitRole::Transferred => 1.0,
                UnitRole::Appended | UnitRole::Classifier => NEW_LAYER_LR_MULTIPLIER,
            };
            UnitPlan {
                trainable,
                lr_multiplier,
            }
        })
        .collect();
    Ok(FreezePlan { units })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::arch::{Architecture, Granularity};
    use crate::tln::build::{build_tln, PretrainedNetwork, SourceMeta, TlnConfig, DESK_SIZES};
    use crate::tln::notation::parse_tln;

    fn tln(text: &str, sizes: Vec<usize>) -> Tln {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Architecture::ToyAlexnet
            .build([3, 16, 16], 8, &mut rng)
            .unwrap();
        let chi = PretrainedNetwork::new(
            net,
            SourceMeta {
                dataset: "toy".into(),
                classes: 8,
                architecture: "toy-alexnet".into(),
                granularity: Granularity::Layer,
            },
        )
        .unwrap();
        let cfg = TlnConfig::new(parse_tln(text).unwrap(), 4)
            .with_sizes(sizes)
            .with_allowed_sizes(DESK_SIZES.to_vec());
        build_tln(&chi, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn nu_six_freezes_first_five() {
        let t = tln("[chi]_N^psi", vec![]);
        let plan = make_freeze_plan(&t, 6).unwrap();
        let flags = plan.trainable_flags();
        assert_eq!(
            flags,
            vec![false, false, false, false, false, true, true, true, true]
        );
        assert_eq!(plan.units[8].lr_multiplier, 10.0);
        assert_eq!(plan.units[0].lr_multiplier, 1.0);
    }

    #[test]
    fn nu_one_trains_everything() {
        let t = tln("[chi]_N^psi", vec![]);
        assert!(make_freeze_plan(&t, 1)
            .unwrap()
            .trainable_flags()
            .iter()
            .all(|&f| f));
    }

    #[test]
    fn last_setup_with_augmentation() {
        let t = tln("[chi]_N^1+psi", vec![64]);
        let plan = make_freeze_plan(&t, 9).unwrap();
        let flags = plan.trainable_flags();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
        assert!(flags[8] && flags[9]);
        assert_eq!(plan.units[8].lr_multiplier, 10.0);
        assert!(make_freeze_plan(&t, 10).is_err());
        assert!(make_freeze_plan(&t, 0).is_err());
    }

    #[test]
    fn plans_are_suffixes() {
        let t = tln("[chi]_N^2+psi", vec![64, 32]);
        for nu in 1..=10 {
            let plan = make_freeze_plan(&t, nu).unwrap();
            assert!(plan.is_suffix());
            assert!(plan.units.last().unwrap().trainable);
        }
    }
}
