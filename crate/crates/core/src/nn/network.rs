use std::collections::HashSet;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layer::{forward_layer, Init, Layer, LayerKind, LayerSpec, Mode, Slot};
use crate::nn::norm::blend;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitRole {
    /// Carries parameters learned on the source task.
    Transferred,
    /// A depth-augmentation layer stacked after the source classifier.
    Appended,
    /// The new classification module.
    Classifier,
}

/// A freeze unit: the granularity at which layers are frozen or tuned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub name: String,
    pub role: UnitRole,
    pub layers: Vec<Layer>,
}

impl Unit {
    pub fn new(
        name: impl Into<String>,
        role: UnitRole,
        specs: Vec<LayerSpec>,
        rng: &mut impl Rng,
    ) -> Self {
        Unit {
            name: name.into(),
            role,
            layers: specs.into_iter().map(|s| Layer::new(s, rng)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.learnable())
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Address of one learnable tensor inside a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub unit: usize,
    pub layer: usize,
    pub slot: Slot,
}

/// A train-mode batch statistic waiting to be folded into running stats.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub unit: usize,
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Forward {
    /// Output of the last unit.
    pub output: Var,
    pub params: Vec<(ParamKey, Var)>,
    pub stats: Vec<StatUpdate>,
    /// Output of every layer and every unit, by name.
    pub named: Vec<(String, Var)>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.named.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// An ordered stack of freeze units over a fixed `[C,H,W]` input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub units: Vec<Unit>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, units: Vec<Unit>) -> Result<Self> {
        let net = Network { input_shape, units };
        net.validate()?;
        Ok(net)
    }

    /// Checks name uniqueness and that consecutive shapes compose.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.names() {
            if !seen.insert(name.clone()) {
                return Err(Error::contract(format!(
                    "duplicate layer or unit name `{name}`"
                )));
            }
        }
        self.output_shape().map(|_| ())
    }

    /// Per-sample output shape of the last unit.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.shape_after(self.units.len())
    }

    /// Per-sample output shape after the first `units` units.
    pub fn shape_after(&self, units: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for unit in &self.units[..units] {
            for layer in &unit.layers {
                shape = layer.output_shape(&shape)?;
            }
        }
        Ok(shape)
    }

    /// Unit names followed by layer names.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.units.iter().map(|u| u.name.clone()).collect();
        out.extend(
            self.units
                .iter()
                .flat_map(|u| u.layers.iter().map(|l| l.spec.name.clone())),
        );
        out
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(Unit::param_count).sum()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.units
            .get(key.unit)?
            .layers
            .get(key.layer)?
            .params
            .slot(key.slot)
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.units
            .get_mut(key.unit)?
            .layers
            .get_mut(key.layer)?
            .params
            .slot_mut(key.slot)
    }

    /// Every learnable tensor with its address, in network order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (u, unit) in self.units.iter().enumerate() {
            for (l, layer) in unit.layers.iter().enumerate() {
                for (slot, _) in layer.params.learnable() {
                    keys.push(ParamKey {
                        unit: u,
                        layer: l,
                        slot,
                    });
                }
            }
        }
        keys
    }

    /// Records a forward pass on `tape`.
    ///
    /// `trainable[u]` decides whether unit `u`'s tensors become trainable
    /// leaves. Frozen units always run in eval mode, so their running
    /// statistics are neither used from the batch nor updated.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: &[bool],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        if trainable.len() != self.units.len() {
            return Err(Error::contract(format!(
                "trainable flags cover {} units, network has {}",
                trainable.len(),
                self.units.len()
            )));
        }
        let mut cur = x;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut named = Vec::new();
        for (u, unit) in self.units.iter().enumerate() {
            let unit_mode = if trainable[u] { mode } else { Mode::Eval };
            for (l, layer) in unit.layers.iter().enumerate() {
                let out = forward_layer(
                    layer,
                    tape,
                    cur,
                    unit_mode,
                    trainable[u],
                    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
                )?;
                params.extend(out.params.into_iter().map(|(slot, v)| {
                    (
                        ParamKey {
                            unit: u,
                            layer: l,
                            slot,
                        },
                        v,
                    )
                }));
                if let Some((mean, var)) = out.batch_stats {
                    stats.push(StatUpdate {
                        unit: u,
                        layer: l,
                        mean,
                        var,
                    });
                }
                named.push((layer.spec.name.clone(), out.out));
                cur = out.out;
            }
            named.push((unit.name.clone(), cur));
        }
        Ok(Forward {
            output: cur,
            params,
            stats,
            named,
        })
    }

    pub fn apply_stats(&mut self, stats: &[StatUpdate]) {
        for s in stats {
            let params = &mut self.units[s.unit].layers[s.layer].params;
            if let Some(m) = params.running_mean.as_mut() {
                blend(m.data_mut(), &s.mean);
            }
            if let Some(v) = params.running_var.as_mut() {
                blend(v.data_mut(), &s.var);
            }
        }
    }

    /// Eval-mode output of the last unit for a `[B,C,H,W]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_tap(x, None)
    }

    /// Eval-mode output of a named layer or unit (or the last unit).
    pub fn predict_tap(&self, x: &Tensor, tap: Option<&str>) -> Result<Tensor> {
        if let Some(name) = tap {
            if !self.names().iter().any(|n| n == name) {
                return Err(Error::UnknownLayer {
                    name: name.to_string(),
                    available: self.names(),
                });
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let frozen = vec![false; self.units.len()];
        let fwd = self.forward(&mut tape, xv, Mode::Eval, &frozen, None)?;
        let v = match tap {
            Some(name) => fwd.tap(name).expect("checked above"),
            None => fwd.output,
        };
        let out = tape.value(v).clone();
        let b = out.shape()[0];
        let d = out.len() / b;
        out.reshape([b, d])
    }
}

pub(crate) fn conv(name: &str, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
    )
}

pub(crate) fn fc(name: &str, inputs: usize, outputs: usize, init: Init) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Fc {
            inputs,
            outputs,
            init,
        },
    )
}

pub(crate) fn relu(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

pub(crate) fn pool(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { size: 2, stride: 2 })
}
