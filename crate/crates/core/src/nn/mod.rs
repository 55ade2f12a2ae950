//! Training harness: layers, networks, loss, optimizer and schedules.

pub mod layers;
pub mod network;
pub mod optim;
pub mod presets;
pub mod schedule;

pub use layers::{ForwardCtx, Layer, Mode, ParamRole, PoolKind};
pub use network::{softmax_cross_entropy, BuildOptions, LayerSpec, Network, ParamTally, StepOutput};
pub use optim::{sgd_update, Sgd, SgdConfig};
pub use presets::{preset, structural_diff, PresetOptions, PRESETS};
pub use schedule::{step_lr, warmup_multiplier};
