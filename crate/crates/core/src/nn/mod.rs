//! Candidate blocks, fixed stem/head scaffold and single-path networks.

pub mod backbone;
pub mod block;
pub mod layers;
pub mod network;
pub mod spec;

pub use backbone::{Backbone, Scaffold, Slot};
pub use block::Block;
pub use layers::{ConvUnit, ForwardCtx, Mode, ParamStore, RunningStats};
pub use network::{Model, StandaloneNet};
pub use spec::{BlockSpec, Depth, OpKind, OperatorSpec, SpaceSpec, Stage, PRESETS};
