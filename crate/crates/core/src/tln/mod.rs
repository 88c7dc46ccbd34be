//! Transfer-learning network construction: slicing, classifier retention,
//! depth augmentation and freeze plans.

mod build;
mod freeze;
pub mod notation;

pub use build::{
    append_classifier, augment_depth, build_tln, slice, NetworkPrefix, NormScheme,
    PretrainedNetwork, Resolved, SourceMeta, Tln, TlnConfig, DESK_SIZES, FULL_SIZES, PSI,
};
pub use freeze::{make_freeze_plan, FreezePlan, UnitPlan, NEW_LAYER_LR_MULTIPLIER};
pub use notation::{format_tln, parse_tln, ParseError, TlnNotation, UnitRef};
