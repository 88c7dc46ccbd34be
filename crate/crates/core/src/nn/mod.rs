//! Layers, freeze units and networks built on the autodiff tape.

pub mod arch;
mod layer;
mod network;
pub mod norm;

pub use layer::{
    forward_layer, init_layer, Init, Layer, LayerKind, LayerOutput, LayerSpec, Mode, Parameters,
    Slot, STD_EPS, STD_MOMENTUM,
};
pub(crate) use network::{conv, fc, pool, relu};
pub use network::{Forward, Network, ParamKey, StatUpdate, Unit, UnitRole};
pub use norm::{batch_standardize, l2_normalize, RunningStats};
