use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ParamKey};
use crate::tln::FreezePlan;

pub type Gradients = BTreeMap<ParamKey, Vec<f64>>;

/// Momentum buffers, one per trainable tensor, created on first use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64) -> Self {
        OptimizerState {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, key: ParamKey) -> Option<&[f64]> {
        self.velocity.get(&key).map(Vec::as_slice)
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.9)
    }
}

/// `v ← μ·v − (lr·multiplier)·g; p ← p + v` for every trainable tensor.
/// Frozen tensors and their velocities are left alone.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut OptimizerState,
    plan: &FreezePlan,
    lr: f64,
) -> Result<()> {
    if plan.units.len() != net.units.len() {
        return Err(Error::contract(format!(
            "freeze plan covers {} units, network has {}",
            plan.units.len(),
            net.units.len()
        )));
    }
    let momentum = state.momentum;
    for key in net.param_keys() {
        let unit = plan.units[key.unit];
        if !unit.trainable {
            continue;
        }
        let g = grads.get(&key).ok_or_else(|| {
            Error::contract(format!(
                "missing gradient for trainable parameter {:?} of unit {}",
                key.slot, net.units[key.unit].name
            ))
        })?;
        let param = net.param_mut(key).expect("key comes from the network");
        if g.len() != param.len() {
            return Err(Error::dim("sgd_step", param.shape(), &[g.len()]));
        }
        let step = lr * unit.lr_multiplier;
        let v = state
            .velocity
            .entry(key)
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((p, v), g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v - step * g;
            *p += *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{fc, Init, Slot, Unit, UnitRole};
    use crate::tln::UnitPlan;

    fn net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Network::new(
            vec![1],
            vec![
                Unit::new(
                    "A",
                    UnitRole::Transferred,
                    vec![fc("A.fc", 1, 1, Init::HeUniform)],
                    &mut rng,
                ),
                Unit::new(
                    "B",
                    UnitRole::Classifier,
                    vec![fc("B.fc", 1, 1, Init::GlorotUniform)],
                    &mut rng,
                ),
            ],
        )
        .unwrap()
    }

    fn key(unit: usize, slot: Slot) -> ParamKey {
        ParamKey {
            unit,
            layer: 0,
            slot,
        }
    }

    fn ones(net: &Network, g: f64) -> Gradients {
        net.param_keys().into_iter().map(|k| (k, vec![g])).collect()
    }

    #[test]
    fn plain_step() {
        let mut n = net();
        n.param_mut(key(0, Slot::Weight)).unwrap().data_mut()[0] = 0.0;
        let plan = FreezePlan::all_trainable(2);
        let mut st = OptimizerState::new(0.0);
        let g = ones(&n, 1.0);
        sgd_step(&mut n, &g, &mut st, &plan, 1.0).unwrap();
        assert_eq!(n.param(key(0, Slot::Weight)).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut n = net();
        n.param_mut(key(0, Slot::Weight)).unwrap().data_mut()[0] = 0.0;
        let plan = FreezePlan::all_trainable(2);
        let mut st = OptimizerState::new(0.5);
        let g = ones(&n, 1.0);
        sgd_step(&mut n, &g, &mut st, &plan, 1.0).unwrap();
        sgd_step(&mut n, &g, &mut st, &plan, 1.0).unwrap();
        // v1 = -1, v2 = -1.5
        assert_eq!(n.param(key(0, Slot::Weight)).unwrap().data(), &[-2.5]);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut n = net();
        let before = n.units[0].clone();
        let plan = FreezePlan {
            units: vec![
                UnitPlan {
                    trainable: false,
                    lr_multiplier: 1.0,
                },
                UnitPlan {
                    trainable: true,
                    lr_multiplier: 10.0,
                },
            ],
        };
        let mut st = OptimizerState::default();
        let g = ones(&n, 0.3);
        for _ in 0..5 {
            sgd_step(&mut n, &g, &mut st, &plan, 0.1).unwrap();
        }
        assert_eq!(n.units[0], before);
        assert!(st.velocity(key(0, Slot::Weight)).is_none());

        let partial: Gradients = [(key(1, Slot::Weight), vec![1.0])].into_iter().collect();
        assert!(matches!(
            sgd_step(&mut n, &partial, &mut st, &plan, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn multiplier_equals_scaled_rate() {
        let g = ones(&net(), 0.37);
        let mut a = net();
        let mut b = net();
        let plan_m = FreezePlan {
            units: vec![
                UnitPlan {
                    trainable: true,
                    lr_multiplier: 10.0
                };
                2
            ],
        };
        let plan_1 = FreezePlan::all_trainable(2);
        sgd_step(&mut a, &g, &mut OptimizerState::new(0.0), &plan_m, 0.005).unwrap();
        sgd_step(
            &mut b,
            &g,
            &mut OptimizerState::new(0.0),
            &plan_1,
            0.005 * 10.0,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
