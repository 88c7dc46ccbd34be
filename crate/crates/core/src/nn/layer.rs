use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the batch-standardization square root.
pub const STD_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running mean/variance.
pub const STD_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialization for FC layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(±sqrt(6/fan_in))`, for layers feeding a ReLU.
    HeUniform,
    /// `U(±sqrt(6/(fan_in+fan_out)))`, for classifiers.
    GlorotUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        init: Init,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Relu,
    L2Norm,
    BatchStd {
        features: usize,
    },
    /// `γ·x (+ β)`. A shared scalar γ without shift, or per-feature γ and β.
    Scale {
        features: usize,
        per_feature: bool,
    },
    /// Inverted dropout; identity in eval mode.
    Dropout {
        rate: f64,
    },
    /// Marks the softmax on top of a classifier. The forward pass leaves
    /// logits untouched; the loss applies the fused softmax.
    SoftmaxHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Learnable slots of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

impl Parameters {
    pub fn slot(&self, slot: Slot) -> Option<&Tensor> {
        match slot {
            Slot::Weight => self.weight.as_ref(),
            Slot::Bias => self.bias.as_ref(),
            Slot::Gamma => self.gamma.as_ref(),
            Slot::Beta => self.beta.as_ref(),
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        match slot {
            Slot::Weight => self.weight.as_mut(),
            Slot::Bias => self.bias.as_mut(),
            Slot::Gamma => self.gamma.as_mut(),
            Slot::Beta => self.beta.as_mut(),
        }
    }

    /// Learnable tensors in a fixed slot order.
    pub fn learnable(&self) -> impl Iterator<Item = (Slot, &Tensor)> {
        [Slot::Weight, Slot::Bias, Slot::Gamma, Slot::Beta]
            .into_iter()
            .filter_map(|s| self.slot(s).map(|t| (s, t)))
    }

    /// Every tensor slot (learnable and running statistics) by field name, in a fixed order.
    pub fn named(&self) -> [(&'static str, Option<&Tensor>); 6] {
        [
            ("weight", self.weight.as_ref()),
            ("bias", self.bias.as_ref()),
            ("gamma", self.gamma.as_ref()),
            ("beta", self.beta.as_ref()),
            ("running_mean", self.running_mean.as_ref()),
            ("running_var", self.running_var.as_ref()),
        ]
    }

    pub fn set_named(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = match name {
            "weight" => &mut self.weight,
            "bias" => &mut self.bias,
            "gamma" => &mut self.gamma,
            "beta" => &mut self.beta,
            "running_mean" => &mut self.running_mean,
            "running_var" => &mut self.running_var,
            other => {
                return Err(Error::contract(format!(
                    "unknown parameter field `{other}`"
                )))
            }
        };
        *slot = Some(t);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Parameters,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Draws fresh parameters for `spec`. Deterministic for a given generator state.
pub fn init_layer(spec: &LayerSpec, rng: &mut impl Rng) -> Parameters {
    match spec.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let fan_in = in_channels * kernel * kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            Parameters {
                weight: Some(uniform(
                    rng,
                    &[out_channels, in_channels, kernel, kernel],
                    bound,
                )),
                bias: Some(Tensor::zeros([out_channels])),
                ..Default::default()
            }
        }
        LayerKind::Fc {
            inputs,
            outputs,
            init,
        } => {
            let bound = match init {
                Init::HeUniform => (6.0 / inputs as f64).sqrt(),
                Init::GlorotUniform => (6.0 / (inputs + outputs) as f64).sqrt(),
            };
            Parameters {
                weight: Some(uniform(rng, &[inputs, outputs], bound)),
                bias: Some(Tensor::zeros([outputs])),
                ..Default::default()
            }
        }
        LayerKind::BatchStd { features } => Parameters {
            running_mean: Some(Tensor::zeros([features])),
            running_var: Some(Tensor::ones([features])),
            ..Default::default()
        },
        LayerKind::Scale {
            features,
            per_feature,
        } => {
            if per_feature {
                Parameters {
                    gamma: Some(Tensor::ones([features])),
                    beta: Some(Tensor::zeros([features])),
                    ..Default::default()
                }
            } else {
                Parameters {
                    gamma: Some(Tensor::ones([1])),
                    ..Default::default()
                }
            }
        }
        LayerKind::MaxPool { .. }
        | LayerKind::Relu
        | LayerKind::L2Norm
        | LayerKind::Dropout { .. }
        | LayerKind::SoftmaxHead => Parameters::default(),
    }
}

impl Layer {
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let params = init_layer(&spec, rng);
        Layer { spec, params }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Output shape (without the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err =
            |want: &[usize]| Err(Error::dim(format!("layer {}", self.spec.name), input, want));
        match self.spec.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return err(&[in_channels, kernel, kernel]);
                }
                match (
                    crate::autograd::out_extent(input[1], kernel, stride, pad),
                    crate::autograd::out_extent(input[2], kernel, stride, pad),
                ) {
                    (Some(h), Some(w)) => Ok(vec![out_channels, h, w]),
                    _ => err(&[in_channels, kernel, kernel]),
                }
            }
            LayerKind::Fc {
                inputs, outputs, ..
            } => {
                if input.iter().product::<usize>() != inputs {
                    return err(&[inputs]);
                }
                Ok(vec![outputs])
            }
            LayerKind::MaxPool { size, stride } => {
                if input.len() != 3 || size > input[1] || size > input[2] {
                    return err(&[size, size]);
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
            LayerKind::BatchStd { features } | LayerKind::Scale { features, .. } => {
                if input != [features] {
                    return err(&[features]);
                }
                Ok(input.to_vec())
            }
            LayerKind::L2Norm => {
                if input.len() != 1 {
                    return err(&[input.iter().product()]);
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::SoftmaxHead => {
                Ok(input.to_vec())
            }
        }
    }
}

/// Values produced by running one layer on a tape.
#[derive(Debug)]
pub struct LayerOutput {
    pub out: Var,
    /// Tape leaves holding this layer's learnable tensors.
    pub params: Vec<(Slot, Var)>,
    /// Batch `(mean, var)` observed by a train-mode `BatchStd`.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Runs `layer` on `x`. Learnable tensors become trainable leaves only when
/// `trainable` is set, so frozen layers cost no gradient work.
pub fn forward_layer(
    layer: &Layer,
    tape: &mut Tape,
    x: Var,
    mode: Mode,
    trainable: bool,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<LayerOutput> {
    forward_inner(layer, tape, x, mode, trainable, rng).map_err(|e| match e {
        Error::Dimension { op, lhs, rhs } => Error::Dimension {
            op: format!("layer {}: {op}", layer.spec.name),
            lhs,
            rhs,
        },
        other => other,
    })
}

fn forward_inner(
    layer: &Layer,
    tape: &mut Tape,
    x: Var,
    mode: Mode,
    trainable: bool,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<LayerOutput> {
    let mut params = Vec::new();
    let mut bind = |tape: &mut Tape, slot: Slot| -> Result<Var> {
        let t = layer.params.slot(slot).cloned().ok_or_else(|| {
            Error::contract(format!("layer {} has no {slot:?} tensor", layer.spec.name))
        })?;
        let v = if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        params.push((slot, v));
        Ok(v)
    };
    let mut batch_stats = None;

    let out = match layer.spec.kind {
        LayerKind::Conv { stride, pad, .. } => {
            let k = bind(tape, Slot::Weight)?;
            let b = bind(tape, Slot::Bias)?;
            tape.conv2d(x, k, Some(b), stride, pad)?
        }
        LayerKind::Fc { .. } => {
            let flat = tape.flatten(x)?;
            let w = bind(tape, Slot::Weight)?;
            let b = bind(tape, Slot::Bias)?;
            tape.affine(flat, w, b)?
        }
        LayerKind::MaxPool { size, stride } => tape.maxpool2d(x, size, stride)?,
        LayerKind::Relu => tape.relu(x),
        LayerKind::L2Norm => {
            let flat = tape.flatten(x)?;
            tape.l2_normalize(flat)?
        }
        LayerKind::BatchStd { .. } => {
            let flat = tape.flatten(x)?;
            match mode {
                Mode::Train => {
                    let (y, mean, var) = tape.batch_standardize(flat, STD_EPS)?;
                    batch_stats = Some((mean, var));
                    y
                }
                Mode::Eval => {
                    let (mean, var) = running_stats(layer)?;
                    tape.standardize_with(flat, mean.data(), var.data(), STD_EPS)?
                }
            }
        }
        LayerKind::Scale { per_feature, .. } => {
            let flat = tape.flatten(x)?;
            let gamma = bind(tape, Slot::Gamma)?;
            let beta = if per_feature {
                Some(bind(tape, Slot::Beta)?)
            } else {
                None
            };
            tape.scale(flat, gamma, beta)?
        }
        LayerKind::Dropout { rate } => match (mode, rng) {
            (Mode::Train, Some(rng)) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let value = tape.value(x);
                let mask: Vec<f64> = (0..value.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = tape.constant(Tensor::new(value.shape().to_vec(), mask)?);
                tape.mul(x, mask)?
            }
            _ => x,
        },
        LayerKind::SoftmaxHead => x,
    };
    Ok(LayerOutput {
        out,
        params,
        batch_stats,
    })
}

fn running_stats(layer: &Layer) -> Result<(&Tensor, &Tensor)> {
    match (&layer.params.running_mean, &layer.params.running_var) {
        (Some(m), Some(v)) => Ok((m, v)),
        _ => Err(Error::contract(format!(
            "layer {} lacks running statistics",
            layer.spec.name
        ))),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fc(inputs: usize, outputs: usize, init: Init) -> LayerSpec {
        LayerSpec::new(
            "fc",
            LayerKind::Fc {
                inputs,
                outputs,
                init,
            },
        )
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = fc(20, 10, Init::HeUniform);
        let a = init_layer(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        let b = init_layer(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let c = init_layer(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        assert_ne!(a, c);
    }

    #[test]
    fn he_bound_for_square_fc() {
        let bound = (6.0f64 / 100.0).sqrt();
        assert!((bound - 0.2449).abs() < 1e-4);
        let p = init_layer(
            &fc(100, 100, Init::HeUniform),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let w = p.weight.unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // The draw actually reaches toward the bound.
        let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.95 * bound);
        assert!(p.bias.unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn glorot_bound_for_classifier() {
        let bound = (6.0f64 / 110.0).sqrt();
        let p = init_layer(
            &fc(100, 10, Init::GlorotUniform),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert!(p.weight.unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn scale_and_std_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = init_layer(
            &LayerSpec::new(
                "s",
                LayerKind::Scale {
                    features: 4,
                    per_feature: false,
                },
            ),
            &mut rng,
        );
        assert_eq!(s.gamma.unwrap().data(), &[1.0]);
        assert!(s.beta.is_none());
        let s = init_layer(
            &LayerSpec::new(
                "s",
                LayerKind::Scale {
                    features: 3,
                    per_feature: true,
                },
            ),
            &mut rng,
        );
        assert_eq!(s.gamma.unwrap().data(), &[1.0; 3]);
        assert_eq!(s.beta.unwrap().data(), &[0.0; 3]);
        let b = init_layer(
            &LayerSpec::new("b", LayerKind::BatchStd { features: 2 }),
            &mut rng,
        );
        assert_eq!(b.running_mean.unwrap().data(), &[0.0, 0.0]);
        assert_eq!(b.running_var.unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_layer_forward() {
        let layer = Layer::new(
            LayerSpec::new("r", LayerKind::Relu),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], vec![-1.0, 2.0]).unwrap());
        let out = forward_layer(&layer, &mut tape, x, Mode::Eval, false, None).unwrap();
        assert_eq!(tape.value(out.out).data(), &[0.0, 2.0]);
    }

    #[test]
    fn fc_layer_delegates_to_affine() {
        let layer = Layer::new(fc(3, 2, Init::HeUniform), &mut ChaCha8Rng::seed_from_u64(9));
        let x = Tensor::new([2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.5, -0.3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = forward_layer(&layer, &mut tape, xv, Mode::Train, true, None).unwrap();
        let got = tape.value(out.out).clone();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.constant(layer.params.weight.clone().unwrap());
        let b = tape.constant(layer.params.bias.clone().unwrap());
        let y = tape.affine(xv, w, b).unwrap();
        assert_eq!(&got, tape.value(y));
    }

    #[test]
    fn eval_std_with_fresh_stats_is_near_identity() {
        let layer = Layer::new(
            LayerSpec::new("bs", LayerKind::BatchStd { features: 3 }),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let data = vec![0.5, -2.0, 3.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3], data.clone()).unwrap());
        let out = forward_layer(&layer, &mut tape, x, Mode::Eval, false, None).unwrap();
        let k = 1.0 / (1.0 + STD_EPS).sqrt();
        for (y, x) in tape.value(out.out).data().iter().zip(&data) {
            assert!((y - x * k).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let layer = Layer::new(fc(3, 2, Init::HeUniform), &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 4]));
        let err = forward_layer(&layer, &mut tape, x, Mode::Eval, false, None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("layer fc"), "{err}");
    }
}
